#include <iostream>

#include "eevit/cli.hpp"

int main(int argc, char** argv) {
  return eevit::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
