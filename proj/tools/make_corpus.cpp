#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "synthetic_corpus.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write a deterministic synthetic text corpus"};
  std::string path;
  std::size_t bytes = 200000;
  std::uint64_t seed = 7;
  app.add_option("output", path, "output file")->required();
  app.add_option("--bytes", bytes, "corpus size in bytes");
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);
  std::ofstream(path, std::ios::binary) << layerskip::testing::synthetic_corpus(bytes, seed);
  return 0;
}
