// Writes the synthetic blob set as a CIFAR binary directory, so that
// `--dataset cifar10 --data-dir <dir>` can be exercised without the real data.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>

#include "sdist/data.hpp"

int main(int argc, char** argv) {
  CLI::App app{"make_fixture"};
  std::string out_dir;
  std::size_t train = 500, test = 100, classes = 10;
  std::uint64_t seed = 0;
  app.add_option("out_dir", out_dir)->required();
  app.add_option("--train", train);
  app.add_option("--test", test);
  app.add_option("--classes", classes)->check(CLI::IsMember({10, 100}));
  app.add_option("--seed", seed);
  CLI11_PARSE(app, argc, argv);

  try {
    namespace fs = std::filesystem;
    using namespace sdist;
    fs::create_directories(out_dir);
    const auto norm = classes == 100 ? Normalization::cifar100() : Normalization::cifar10();
    auto train_set = synthetic_dataset(train, classes, seed, norm);
    auto test_set = synthetic_dataset(test, classes, seed + 1, norm);

    const auto train_files = cifar_files(classes, true);
    const std::size_t per_file = (train_set.size() + train_files.size() - 1) / train_files.size();
    for (std::size_t f = 0; f < train_files.size(); ++f) {
      Dataset part;
      part.classes = classes;
      part.normalization = norm;
      const std::size_t lo = std::min(f * per_file, train_set.size());
      const std::size_t hi = std::min(lo + per_file, train_set.size());
      part.images.assign(train_set.images.begin() + lo, train_set.images.begin() + hi);
      write_cifar_binary(fs::path(out_dir) / train_files[f], part);
    }
    write_cifar_binary(fs::path(out_dir) / cifar_files(classes, false).front(), test_set);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
