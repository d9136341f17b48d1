#include <iostream>
#include <string>
#include <vector>

#include "layerskip/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return layerskip::cli::run(args, std::cout, std::cerr);
}
