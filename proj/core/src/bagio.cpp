#include "roam/bagio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace roam::bagio {
namespace {

static_assert(std::endian::native == std::endian::little,
              "bag encoding assumes a little-endian host");

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get(const std::vector<std::uint8_t>& in, std::size_t offset) {
  T value;
  std::memcpy(&value, in.data() + offset, sizeof(T));
  return value;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

std::string trim(const std::string& s) {
  auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return {};
  auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

void validate(const PatchBag& bag) {
  if (bag.embeddings.rows() < 1) throw InvalidArgument("bag must hold at least one patch");
  if (bag.coords.rows() != bag.embeddings.rows() || bag.coords.cols() != 2) {
    throw InvalidArgument("coords must be N x 2 and match the embedding rows");
  }
  if (bag.embeddings.cols() < 1) throw InvalidArgument("embedding dimension must be positive");
  if (!all_finite(bag.embeddings) || !all_finite(bag.coords)) {
    throw InvalidArgument("bag contains non-finite values");
  }
}

std::vector<std::uint8_t> encode_bag(const PatchBag& bag) {
  validate(bag);
  const auto n = static_cast<std::uint32_t>(bag.size());
  const auto d = static_cast<std::uint32_t>(bag.dim());
  std::vector<std::uint8_t> out;
  out.reserve(bag_file_size(n, d));
  for (char c : kBagMagic) out.push_back(static_cast<std::uint8_t>(c));
  put<std::uint32_t>(out, kBagVersion);
  put<std::uint32_t>(out, n);
  put<std::uint32_t>(out, d);
  put<std::int32_t>(out, bag.label);
  out.resize(kBagHeaderBytes, 0);
  for (Eigen::Index i = 0; i < bag.embeddings.rows(); ++i) {
    for (Eigen::Index j = 0; j < bag.embeddings.cols(); ++j) {
      put<float>(out, static_cast<float>(bag.embeddings(i, j)));
    }
  }
  for (Eigen::Index i = 0; i < bag.coords.rows(); ++i) {
    put<float>(out, static_cast<float>(bag.coords(i, 0)));
    put<float>(out, static_cast<float>(bag.coords(i, 1)));
  }
  return out;
}

PatchBag decode_bag(const std::vector<std::uint8_t>& bytes, std::string slide_id) {
  if (bytes.size() < sizeof(kBagMagic) ||
      !std::equal(std::begin(kBagMagic), std::end(kBagMagic), bytes.begin())) {
    throw BagError(BagErrorCode::kBadMagic, "bad magic: not a ROAMBAG1 file");
  }
  if (bytes.size() < kBagHeaderBytes) {
    throw BagError(BagErrorCode::kTruncated, "truncated header");
  }
  const auto version = get<std::uint32_t>(bytes, 8);
  if (version != kBagVersion) {
    throw BagError(BagErrorCode::kUnsupportedVersion,
                   "unsupported bag version " + std::to_string(version));
  }
  const auto n = get<std::uint32_t>(bytes, 12);
  const auto d = get<std::uint32_t>(bytes, 16);
  const auto label = get<std::int32_t>(bytes, 20);
  if (n == 0 || d == 0) {
    throw BagError(BagErrorCode::kDimensionMismatch, "header declares an empty bag");
  }
  const std::uint64_t expected = bag_file_size(n, d);
  if (bytes.size() < expected) {
    throw BagError(BagErrorCode::kTruncated,
                   "truncated payload: expected " + std::to_string(expected) + " bytes, got " +
                       std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw BagError(BagErrorCode::kDimensionMismatch,
                   "payload larger than header dimensions imply (" + std::to_string(bytes.size()) +
                       " vs " + std::to_string(expected) + " bytes)");
  }
  PatchBag bag;
  bag.slide_id = std::move(slide_id);
  bag.label = label;
  bag.embeddings.resize(n, d);
  bag.coords.resize(n, 2);
  std::size_t offset = kBagHeaderBytes;
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = 0; j < d; ++j, offset += 4) {
      bag.embeddings(i, j) = get<float>(bytes, offset);
    }
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    bag.coords(i, 0) = get<float>(bytes, offset);
    bag.coords(i, 1) = get<float>(bytes, offset + 4);
    offset += 8;
  }
  if (!all_finite(bag.embeddings) || !all_finite(bag.coords)) {
    throw BagError(BagErrorCode::kNonFinite, "bag payload contains non-finite values");
  }
  return bag;
}

void write_bag(const PatchBag& bag, const std::filesystem::path& path) {
  const auto bytes = encode_bag(bag);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BagError(BagErrorCode::kIo, "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw BagError(BagErrorCode::kIo, "write failed: " + path.string());
}

PatchBag read_bag(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BagError(BagErrorCode::kIo, "cannot open bag: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_bag(bytes, path.stem().string());
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  throw InvalidArgument("unknown split tag '" + text + "'");
}

std::vector<ManifestEntry> DatasetManifest::split(Split which) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [which](const ManifestEntry& e) { return e.split == which; });
  return out;
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest: " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != "slide_id,path,label,split") {
    throw InvalidArgument("manifest header must be 'slide_id,path,label,split': " + path.string());
  }
  const auto base = path.parent_path();
  DatasetManifest manifest;
  std::vector<std::string> seen;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 4) {
      throw InvalidArgument("manifest line " + std::to_string(line_no) + ": expected 4 fields");
    }
    ManifestEntry entry;
    entry.slide_id = fields[0];
    entry.path = fields[1];
    if (entry.path.is_relative()) entry.path = base / entry.path;
    try {
      entry.label = std::stoi(fields[2]);
    } catch (const std::exception&) {
      throw InvalidArgument("manifest line " + std::to_string(line_no) + ": bad label '" +
                            fields[2] + "'");
    }
    entry.split = parse_split(fields[3]);
    if (std::find(seen.begin(), seen.end(), entry.slide_id) != seen.end()) {
      throw InvalidArgument("duplicate slide_id in manifest: " + entry.slide_id);
    }
    seen.push_back(entry.slide_id);
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path.string());
  out << "slide_id,path,label,split\n";
  for (const auto& e : manifest.entries) {
    out << e.slide_id << ',' << e.path.generic_string() << ',' << e.label << ','
        << to_string(e.split) << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

PatchBag load_entry(const ManifestEntry& entry, std::vector<std::string>* warnings) {
  PatchBag bag = read_bag(entry.path);
  bag.slide_id = entry.slide_id;
  if (bag.label != entry.label) {
    if (warnings != nullptr) {
      warnings->push_back("label conflict for " + entry.slide_id + ": header " +
                          std::to_string(bag.label) + ", manifest " + std::to_string(entry.label) +
                          " (manifest wins)");
    }
    bag.label = entry.label;
  }
  return bag;
}

PatchBag subsample_bag(const PatchBag& bag, std::int64_t max_n, std::uint64_t seed) {
  if (max_n < 1) throw InvalidArgument("max_n must be >= 1");
  if (bag.size() <= max_n) return bag;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(bag.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(max_n));
  std::sort(order.begin(), order.end());
  PatchBag out;
  out.slide_id = bag.slide_id;
  out.label = bag.label;
  out.embeddings.resize(max_n, bag.dim());
  out.coords.resize(max_n, 2);
  for (std::size_t r = 0; r < order.size(); ++r) {
    out.embeddings.row(static_cast<Eigen::Index>(r)) = bag.embeddings.row(order[r]);
    out.coords.row(static_cast<Eigen::Index>(r)) = bag.coords.row(order[r]);
  }
  return out;
}

SynthSpec default_synth_spec() {
  SynthSpec spec;
  spec.class_rules = {ClassRule{{0, 1, 2}, {}}, ClassRule{{2, 3}, {3}}};
  return spec;
}

void validate(const SynthSpec& spec) {
  if (spec.n_slides_per_class < 1) throw InvalidArgument("n_slides_per_class must be >= 1");
  if (spec.min_patches < 1 || spec.max_patches < spec.min_patches) {
    throw InvalidArgument("patch range must satisfy 1 <= min_patches <= max_patches");
  }
  if (spec.d_in < 1) throw InvalidArgument("d_in must be >= 1");
  if (spec.class_rules.empty()) throw InvalidArgument("at least one class rule is required");
  if (spec.n_archetypes < spec.n_classes()) {
    throw InvalidArgument("archetype count must be >= number of classes");
  }
  if (!(spec.noise_scale >= 0.0) || !std::isfinite(spec.noise_scale)) {
    throw InvalidArgument("noise_scale must be finite and non-negative");
  }
  if (!(spec.archetype_separation >= 0.0)) throw InvalidArgument("separation must be >= 0");
  if (spec.min_cells < 1 || spec.max_cells < spec.min_cells) {
    throw InvalidArgument("cell range must satisfy 1 <= min_cells <= max_cells");
  }
  for (const auto& rule : spec.class_rules) {
    if (rule.allowed.empty()) throw InvalidArgument("class rule needs allowed archetypes");
    auto in_range = [&](int a) { return a >= 0 && a < spec.n_archetypes; };
    if (!std::all_of(rule.allowed.begin(), rule.allowed.end(), in_range) ||
        !std::all_of(rule.required.begin(), rule.required.end(), in_range)) {
      throw InvalidArgument("class rule references an unknown archetype");
    }
  }
}

Matrix archetype_means(const SynthSpec& spec) {
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix means(spec.n_archetypes, spec.d_in);
  for (int a = 0; a < spec.n_archetypes; ++a) {
    for (int j = 0; j < spec.d_in; ++j) means(a, j) = normal(rng);
    const double norm = means.row(a).norm();
    const double scale = norm > 0 ? spec.archetype_separation / std::sqrt(2.0) / norm : 0.0;
    for (int j = 0; j < spec.d_in; ++j) means(a, j) = to_f32(means(a, j) * scale);
  }
  return means;
}

namespace {

struct SlideLayout {
  Matrix coords;
  std::vector<int> archetype;
};

SlideLayout layout_slide(const SynthSpec& spec, int cls, std::mt19937_64& rng) {
  const auto& rule = spec.class_rules[static_cast<std::size_t>(cls)];
  std::uniform_int_distribution<int> n_dist(spec.min_patches, spec.max_patches);
  const int n = n_dist(rng);
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  std::uniform_real_distribution<double> jitter(-0.4, 0.4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SlideLayout layout;
  layout.coords.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    const int ix = i % side;
    const int iy = i / side;
    layout.coords(i, 0) = to_f32((ix + 0.5 + jitter(rng)) / side);
    layout.coords(i, 1) = to_f32((iy + 0.5 + jitter(rng)) / side);
  }

  std::uniform_int_distribution<int> cells_dist(spec.min_cells, spec.max_cells);
  const int n_cells = cells_dist(rng);
  Matrix seeds(n_cells, 2);
  for (int c = 0; c < n_cells; ++c) {
    seeds(c, 0) = unit(rng);
    seeds(c, 1) = unit(rng);
  }
  std::vector<int> cell_archetype(static_cast<std::size_t>(n_cells));
  std::uniform_int_distribution<std::size_t> pick(0, rule.allowed.size() - 1);
  for (int c = 0; c < n_cells; ++c) {
    const auto uc = static_cast<std::size_t>(c);
    cell_archetype[uc] = uc < rule.required.size() ? rule.required[uc] : rule.allowed[pick(rng)];
  }

  layout.archetype.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < n_cells; ++c) {
      const double d = (layout.coords.row(i) - seeds.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    layout.archetype[static_cast<std::size_t>(i)] = cell_archetype[static_cast<std::size_t>(best)];
  }
  return layout;
}

std::mt19937_64 slide_rng(const SynthSpec& spec, int cls, std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(cls)};
  return std::mt19937_64(seq);
}

void check_class(const SynthSpec& spec, int cls) {
  if (cls < 0 || cls >= spec.n_classes()) {
    throw InvalidArgument("class " + std::to_string(cls) + " has no class rule");
  }
}

}  // namespace

std::vector<int> synthetic_archetypes(const SynthSpec& spec, int cls, std::uint64_t seed) {
  validate(spec);
  check_class(spec, cls);
  auto rng = slide_rng(spec, cls, seed);
  return layout_slide(spec, cls, rng).archetype;
}

PatchBag gen_synthetic_slide(const SynthSpec& spec, int cls, std::uint64_t seed) {
  validate(spec);
  check_class(spec, cls);
  const Matrix means = archetype_means(spec);
  auto rng = slide_rng(spec, cls, seed);
  SlideLayout layout = layout_slide(spec, cls, rng);
  std::normal_distribution<double> normal(0.0, 1.0);

  PatchBag bag;
  bag.slide_id = "synth_c" + std::to_string(cls) + "_s" + std::to_string(seed);
  bag.label = cls;
  const auto n = layout.coords.rows();
  bag.embeddings.resize(n, spec.d_in);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int a = layout.archetype[static_cast<std::size_t>(i)];
    for (int j = 0; j < spec.d_in; ++j) {
      const double noise = spec.noise_scale > 0 ? spec.noise_scale * normal(rng) : 0.0;
      bag.embeddings(i, j) = to_f32(means(a, j) + noise);
    }
  }
  bag.coords = std::move(layout.coords);
  return bag;
}

}  // namespace roam::bagio
