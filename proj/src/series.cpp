#include "xrag/series.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>

namespace xrag {

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::optional<double> parse_real(const std::string& cell) {
  if (cell.empty()) return std::nullopt;
  const char* begin = cell.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end != begin + cell.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  bool first_column_is_timestamp = false;
};

CsvTable read_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SeriesError("cannot open CSV file: " + path.string());
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw SeriesError("CSV file has no header row: " + path.string());
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
      static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF) {
    line.erase(0, 3);
  }
  table.header = split_row(line);
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto cells = split_row(line);
    cells.resize(std::max(cells.size(), table.header.size()));
    table.rows.push_back(std::move(cells));
  }
  if (!table.rows.empty()) {
    table.first_column_is_timestamp = !parse_real(table.rows.front().front()).has_value() &&
                                      !table.rows.front().front().empty();
  }
  return table;
}

Series extract_column(const CsvTable& table, std::size_t col, const std::filesystem::path& path) {
  if (col == 0 && table.first_column_is_timestamp) {
    throw SeriesError("column 0 is a timestamp column in " + path.string());
  }
  Series s;
  s.name = table.header[col];
  s.source_id = path.filename().string() + ":" + s.name;
  s.values.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    auto v = parse_real(table.rows[r][col]);
    if (!v) {
      // Row numbers count the header as row 1.
      throw SeriesError("unparsable cell in column '" + s.name + "' at row " + std::to_string(r + 2) +
                        " of " + path.string());
    }
    s.values.push_back(*v);
  }
  return s;
}

}  // namespace

std::vector<double> ScaledWindow::apply(std::span<const double> v) const {
  std::vector<double> out(v.size());
  const double denom = range_val + kEpsilon;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - min_val) / denom;
  return out;
}

std::vector<double> ScaledWindow::invert(std::span<const double> v) const {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = invert(v[i]);
  return out;
}

Series load_csv(const std::filesystem::path& path, const ColumnRef& column) {
  if (!std::filesystem::exists(path)) throw SeriesError("CSV file not found: " + path.string());
  const auto table = read_table(path);
  std::size_t col = 0;
  if (const auto* name = std::get_if<std::string>(&column)) {
    auto it = std::find(table.header.begin(), table.header.end(), *name);
    if (it == table.header.end()) throw SeriesError("column '" + *name + "' not found in " + path.string());
    col = static_cast<std::size_t>(it - table.header.begin());
  } else {
    col = std::get<std::size_t>(column);
    if (col >= table.header.size()) {
      throw SeriesError("column index " + std::to_string(col) + " out of range in " + path.string());
    }
  }
  return extract_column(table, col, path);
}

std::vector<Series> load_csv_channels(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw SeriesError("CSV file not found: " + path.string());
  const auto table = read_table(path);
  std::vector<Series> out;
  for (std::size_t c = table.first_column_is_timestamp ? 1 : 0; c < table.header.size(); ++c) {
    out.push_back(extract_column(table, c, path));
  }
  return out;
}

std::vector<WindowPair> make_windows(const Series& s, std::size_t T, std::size_t L, std::size_t stride) {
  if (T == 0 || L == 0 || stride == 0) throw std::invalid_argument("make_windows: T, L and stride must be >= 1");
  const std::size_t n = s.values.size();
  if (n == 0) throw EmptySeriesError("make_windows: series '" + s.name + "' is empty");
  if (n < T + L) {
    throw SeriesTooShortError("make_windows: series '" + s.name + "' has " + std::to_string(n) +
                              " samples, need at least T+L = " + std::to_string(T + L));
  }
  const std::size_t count = (n - T - L) / stride + 1;
  std::vector<WindowPair> out;
  out.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    const std::size_t start = w * stride;
    WindowPair p;
    p.x.assign(s.values.begin() + static_cast<std::ptrdiff_t>(start),
               s.values.begin() + static_cast<std::ptrdiff_t>(start + T));
    p.y.assign(s.values.begin() + static_cast<std::ptrdiff_t>(start + T),
               s.values.begin() + static_cast<std::ptrdiff_t>(start + T + L));
    p.source_id = s.source_id;
    p.start_index = static_cast<std::int64_t>(start);
    out.push_back(std::move(p));
  }
  return out;
}

ScaledWindow minmax_scale(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("minmax_scale: empty window");
  auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  ScaledWindow out;
  out.min_val = *lo;
  out.range_val = *hi - *lo;
  out.values = out.apply(x);
  return out;
}

namespace {

constexpr double kRelevantCycles[] = {4.0, 5.0, 6.0};
constexpr double kIrrelevantCycles[] = {13.0, 17.0};

std::vector<ToyFamily> toy_families(const ToyCorpusSpec& spec) {
  std::vector<ToyFamily> fams;
  int id = 0;
  for (std::size_t i = 0; i < spec.n_relevant_families; ++i) {
    fams.push_back({id++, FamilyKind::RelevantSine, kRelevantCycles[i % 3], 0.25 * static_cast<double>(i / 3)});
  }
  for (std::size_t j = 0; j < spec.n_irrelevant_families; ++j) {
    if (j % 2 == 0) {
      fams.push_back({id++, FamilyKind::IrrelevantSine, kIrrelevantCycles[(j / 2) % 2],
                      0.25 * static_cast<double>(j / 4)});
    } else {
      fams.push_back({id++, FamilyKind::RandomWalk, 0.0, 0.0});
    }
  }
  return fams;
}

WindowPair toy_window(const ToyFamily& fam, const ToyCorpusSpec& spec, std::mt19937_64& rng,
                      const std::string& split, std::size_t sample) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t n = spec.T + spec.L;
  std::vector<double> v(n);
  if (fam.kind == FamilyKind::RandomWalk) {
    double level = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      level += gauss(rng);
      v[t] = level;
    }
  } else {
    double phase = 0.0;
    if (spec.phase_grid > 0) {
      auto slot = static_cast<std::size_t>(unit(rng) * static_cast<double>(spec.phase_grid));
      slot = std::min(slot, spec.phase_grid - 1);
      phase = 2.0 * std::numbers::pi * static_cast<double>(slot) / static_cast<double>(spec.phase_grid);
    } else {
      phase = 2.0 * std::numbers::pi * unit(rng);
    }
    const double amplitude = 0.5 + unit(rng);
    const double offset = 2.0 * unit(rng) - 1.0;
    const double omega = 2.0 * std::numbers::pi * fam.cycles_per_window / static_cast<double>(spec.T);
    for (std::size_t t = 0; t < n; ++t) {
      const double tt = static_cast<double>(t);
      v[t] = offset + amplitude * (std::sin(omega * tt + phase) + fam.harmonic * std::sin(2.0 * (omega * tt + phase)));
    }
  }
  if (spec.noise_sigma > 0.0) {
    for (auto& e : v) e += spec.noise_sigma * gauss(rng);
  }
  WindowPair p;
  p.x.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(spec.T));
  p.y.assign(v.begin() + static_cast<std::ptrdiff_t>(spec.T), v.end());
  p.source_id = "toy:" + split + ":f" + std::to_string(fam.id);
  p.start_index = static_cast<std::int64_t>(sample * n);
  p.family = fam.id;
  return p;
}

}  // namespace

ToyCorpus gen_toy_corpus(const ToyCorpusSpec& spec) {
  if (spec.n_relevant_families + spec.n_irrelevant_families == 0) {
    throw std::invalid_argument("gen_toy_corpus: zero families requested");
  }
  if (spec.n_relevant_families == 0) throw std::invalid_argument("gen_toy_corpus: test queries need a relevant family");
  if (spec.samples_per_family == 0 || spec.T == 0 || spec.L == 0) {
    throw std::invalid_argument("gen_toy_corpus: samples_per_family, T and L must be >= 1");
  }
  ToyCorpus corpus;
  corpus.families = toy_families(spec);
  std::mt19937_64 rng(spec.seed);
  auto fill = [&](std::vector<WindowPair>& split, const std::string& name, bool relevant_only) {
    for (const auto& fam : corpus.families) {
      if (relevant_only && fam.kind != FamilyKind::RelevantSine) continue;
      for (std::size_t s = 0; s < spec.samples_per_family; ++s) {
        split.push_back(toy_window(fam, spec, rng, name, s));
      }
    }
  };
  fill(corpus.pretrain, "pretrain", false);
  fill(corpus.kb, "kb", false);
  fill(corpus.test, "test", true);
  return corpus;
}

void export_toy_csv(const ToyCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw SeriesError("cannot write " + path.string());
  const auto& any = corpus.pretrain.empty() ? corpus.kb : corpus.pretrain;
  const std::size_t T = any.empty() ? 0 : any.front().x.size();
  const std::size_t L = any.empty() ? 0 : any.front().y.size();
  out << "split,family,source_id,start_index";
  for (std::size_t i = 0; i < T; ++i) out << ",x" << i;
  for (std::size_t i = 0; i < L; ++i) out << ",y" << i;
  out << '\n';
  char buf[32];
  auto dump = [&](const std::vector<WindowPair>& split, const char* name) {
    for (const auto& p : split) {
      out << name << ',' << p.family << ',' << p.source_id << ',' << p.start_index;
      for (double v : p.x) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << ',' << buf;
      }
      for (double v : p.y) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << ',' << buf;
      }
      out << '\n';
    }
  };
  dump(corpus.pretrain, "pretrain");
  dump(corpus.kb, "kb");
  dump(corpus.test, "test");
  if (!out) throw SeriesError("write failed: " + path.string());
}

}  // namespace xrag
