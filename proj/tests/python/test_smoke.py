import numpy as np
import pytest

import promptmi


def test_synthetic_pair_shape_and_norm():
    a, b = promptmi.synthetic_pair(dim=8, n=3, k=4, separation_angle=0.2, seed=1)
    assert a.shape == (3, 4, 8) and b.shape == (3, 4, 8)
    assert np.allclose(np.linalg.norm(a, axis=2), 1.0)
    again, _ = promptmi.synthetic_pair(dim=8, n=3, k=4, separation_angle=0.2, seed=1)
    assert np.array_equal(a, again)


def test_permutation_test_is_deterministic():
    a, b = promptmi.synthetic_pair(dim=16, n=5, k=3, separation_angle=0.8, within_noise=0.2, seed=3)
    r1 = promptmi.permutation_test(a, b, n_permutations=500, seed=9)
    r2 = promptmi.permutation_test(a, b, n_permutations=500, seed=9, threads=2)
    assert r1 == r2
    assert r1["decision"] == "distinct"
    assert r1["s_obs"] == pytest.approx(promptmi.observed_statistic(a, b))


def test_exact_test_on_orthogonal_instance():
    v1 = np.array([[[1.0, 0.0], [1.0, 0.0]]])
    v2 = np.array([[[0.0, 1.0], [0.0, 1.0]]])
    r = promptmi.exact_permutation_test(v1, v2)
    assert r["p_value"] == 2 / 6
    assert r["n_permutations_run"] == 6


def test_blackbox_threshold():
    a, b = promptmi.synthetic_pair(dim=8, n=4, k=3, seed=5)
    r = promptmi.blackbox_test(a, [("r1", b), ("r2", b)], n_permutations=200)
    assert r["corrected_alpha"] == 0.025
    assert len(r["per_reference"]) == 2


def test_metrics():
    m = promptmi.compute_metrics([0.0, 0.0, 0.1], [False, False, False])
    assert m["fpr"] == 1 / 3


def test_errors_are_raised():
    a, _ = promptmi.synthetic_pair(dim=8, n=2, k=2)
    c, _ = promptmi.synthetic_pair(dim=8, n=2, k=3)
    with pytest.raises(ValueError):
        promptmi.permutation_test(a, c)
    with pytest.raises(ValueError):
        promptmi.mock_embed("x", dim=1)


def test_cli(tmp_path):
    code, out, _ = promptmi.run_cli(["--version"])
    assert code == 0 and out.strip() == promptmi.__version__
    dump = str(tmp_path / "s.jsonl")
    assert promptmi.run_cli(["synth", "--n", "2", "--k", "2", "--data-out", dump])[0] == 0
    code, out, _ = promptmi.run_cli(["--permutations", "50", "test", "--known", dump, "--target", dump,
                                     "--known-prompt-id", "group1", "--target-prompt-id", "group1"])
    assert code == 0 and "insufficient evidence" in out
    assert promptmi.run_cli(["nope"])[0] == 2
