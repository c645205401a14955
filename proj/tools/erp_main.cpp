#include <iostream>
#include <string>
#include <vector>

#include "erp/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return erp::cli::run(args, std::cout, std::cerr);
}
