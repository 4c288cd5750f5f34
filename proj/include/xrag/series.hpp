#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace xrag {

struct Series {
  std::vector<double> values;
  std::string source_id;
  std::string name;
};

// One (input, horizon) pair cut from a source series. `family` is an optional
// generator label (-1 when unknown); it never takes part in retrieval.
struct WindowPair {
  std::vector<double> x;
  std::vector<double> y;
  std::string source_id;
  std::int64_t start_index = 0;
  int family = -1;
};

struct ScaledWindow {
  std::vector<double> values;
  double min_val = 0.0;
  double range_val = 0.0;

  // Maps a value from the scaled space back to the original units.
  double invert(double v) const { return v * (range_val + kEpsilon) + min_val; }
  // Applies the same affine map to another vector (e.g. the paired horizon).
  std::vector<double> apply(std::span<const double> v) const;
  std::vector<double> invert(std::span<const double> v) const;

  static constexpr double kEpsilon = 1e-8;
};

class SeriesError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptySeriesError : public SeriesError {
 public:
  using SeriesError::SeriesError;
};

class SeriesTooShortError : public SeriesError {
 public:
  using SeriesError::SeriesError;
};

using ColumnRef = std::variant<std::string, std::size_t>;

Series load_csv(const std::filesystem::path& path, const ColumnRef& column);

// Every numeric column except a leading timestamp column.
std::vector<Series> load_csv_channels(const std::filesystem::path& path);

std::vector<WindowPair> make_windows(const Series& s, std::size_t T, std::size_t L,
                                     std::size_t stride = 1);

ScaledWindow minmax_scale(std::span<const double> x);

enum class FamilyKind { RelevantSine, IrrelevantSine, RandomWalk };

struct ToyCorpusSpec {
  std::size_t n_relevant_families = 3;
  std::size_t n_irrelevant_families = 3;
  std::size_t samples_per_family = 100;
  double noise_sigma = 0.05;
  std::uint64_t seed = 7;
  std::size_t T = 64;
  std::size_t L = 16;
  // 0 draws phases uniformly; n > 0 draws them from an n-point grid.
  std::size_t phase_grid = 0;
};

struct ToyFamily {
  int id = 0;
  FamilyKind kind = FamilyKind::RelevantSine;
  double cycles_per_window = 0.0;  // 0 for random walks
  double harmonic = 0.0;
};

struct ToyCorpus {
  std::vector<WindowPair> pretrain;
  std::vector<WindowPair> kb;
  std::vector<WindowPair> test;
  std::vector<ToyFamily> families;
};

ToyCorpus gen_toy_corpus(const ToyCorpusSpec& spec);

// One row per window pair: split, family, source_id, start_index, x..., y...
void export_toy_csv(const ToyCorpus& corpus, const std::filesystem::path& path);

}  // namespace xrag
