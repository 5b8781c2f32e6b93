#include <string>
#include <vector>

#include "msme/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return msme::cli::run_command(args);
}
