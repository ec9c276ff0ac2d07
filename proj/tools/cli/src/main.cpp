#include <iostream>

#include "app.hpp"
#include "config.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mad::cli::run_cli(args, std::cout, std::cerr, mad::cli::process_env());
}
