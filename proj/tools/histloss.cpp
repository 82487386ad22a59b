#include <string>
#include <vector>

#include "histloss/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return histloss::cli::main_entry(args);
}
