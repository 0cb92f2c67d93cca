#include <string>
#include <vector>

#include "taxon/cli.hpp"

int main(int argc, char** argv) {
  return taxon::cli::run(std::vector<std::string>(argv, argv + argc));
}
