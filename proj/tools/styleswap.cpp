#include <iostream>

#include "styleswap/cli.hpp"

int main(int argc, char** argv) {
  return styleswap::cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
