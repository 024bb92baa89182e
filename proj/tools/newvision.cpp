#include <iostream>

#include "nv/cli.hpp"

int main(int argc, char** argv) {
  return nv::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
