#include <iostream>
#include <string>
#include <vector>

#include "promptmi/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return promptmi::cli::run(args, std::cout, std::cerr);
}
