#include <string>
#include <vector>

#include "decaps/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return decaps::cli::run(args);
}
