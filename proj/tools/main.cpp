#include <string>
#include <vector>

#include "stickerlab/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return stickerlab::run_cli(args);
}
