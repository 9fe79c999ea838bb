#include <iostream>

#include "quadra/cli.hpp"

int main(int argc, char** argv) {
  return quadra::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
