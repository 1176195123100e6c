#include <string>
#include <vector>

#include "vidconcept/cli.hpp"

int main(int argc, char** argv) {
  return vidconcept::cli::run(std::vector<std::string>(argv, argv + argc));
}
