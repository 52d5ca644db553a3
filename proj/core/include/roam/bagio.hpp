#pragma once

// Patch-bag persistence, dataset manifests, subsampling and the synthetic
// spatially structured slide generator.

#include "roam/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace roam::bagio {

// One slide: N patch embeddings with their 2D coordinates and a class label.
struct PatchBag {
  std::string slide_id;
  Matrix embeddings;  // N x d_in
  Matrix coords;      // N x 2
  std::int32_t label = 0;

  Eigen::Index size() const { return embeddings.rows(); }
  Eigen::Index dim() const { return embeddings.cols(); }
};

// Throws InvalidArgument when the bag is empty, shapes disagree or any entry
// is non-finite.
void validate(const PatchBag& bag);

enum class BagErrorCode {
  kIo,
  kBadMagic,
  kUnsupportedVersion,
  kTruncated,
  kDimensionMismatch,
  kNonFinite,
};

class BagError : public Error {
 public:
  BagError(BagErrorCode code, const std::string& what) : Error(what), code_(code) {}
  BagErrorCode code() const { return code_; }

 private:
  BagErrorCode code_;
};

inline constexpr char kBagMagic[8] = {'R', 'O', 'A', 'M', 'B', 'A', 'G', '1'};
inline constexpr std::uint32_t kBagVersion = 1;
// Header: magic, u32 version, u32 N, u32 d_in, i32 label, then zero bytes up
// to offset 40. Payload: N*d_in f32 embeddings, N*2 f32 coords, row-major.
inline constexpr std::size_t kBagHeaderBytes = 40;

// Size in bytes of a bag file holding n patches of dimension d_in.
constexpr std::uint64_t bag_file_size(std::uint64_t n, std::uint64_t d_in) {
  return kBagHeaderBytes + 4 * n * (d_in + 2);
}

// Encode/decode the binary bag layout. Values are stored as little-endian
// f32; callers that need a bit-exact roundtrip should hold f32-representable
// values.
std::vector<std::uint8_t> encode_bag(const PatchBag& bag);
PatchBag decode_bag(const std::vector<std::uint8_t>& bytes, std::string slide_id = {});

void write_bag(const PatchBag& bag, const std::filesystem::path& path);
// The slide id defaults to the file stem.
PatchBag read_bag(const std::filesystem::path& path);

enum class Split { kTrain, kVal, kTest };

std::string to_string(Split split);
Split parse_split(const std::string& text);

struct ManifestEntry {
  std::string slide_id;
  std::filesystem::path path;
  std::int32_t label = 0;
  Split split = Split::kTrain;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> split(Split which) const;
};

// CSV with header `slide_id,path,label,split`. Relative paths are resolved
// against the manifest's directory on read and written as given.
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Loads the bag of one manifest entry. The manifest label wins over the header
// label; a conflict is appended to `warnings` when provided.
PatchBag load_entry(const ManifestEntry& entry, std::vector<std::string>* warnings = nullptr);

// Uniform sample without replacement of max_n rows (seeded index shuffle).
// Returns the bag unchanged when it already has at most max_n patches.
PatchBag subsample_bag(const PatchBag& bag, std::int64_t max_n, std::uint64_t seed);

// Which archetypes a class may place in its Voronoi cells. Every archetype in
// `required` is placed in at least one cell (when the slide has enough cells).
struct ClassRule {
  std::vector<int> allowed;
  std::vector<int> required;
};

struct SynthSpec {
  int n_slides_per_class = 20;
  int min_patches = 200;
  int max_patches = 400;
  int d_in = 32;
  int n_archetypes = 4;
  double archetype_separation = 3.0;
  double noise_scale = 1.0;
  int min_cells = 4;  // Voronoi seeds per slide
  int max_cells = 8;
  std::vector<ClassRule> class_rules;  // one per class
  std::uint64_t seed = 0;

  int n_classes() const { return static_cast<int>(class_rules.size()); }
};

// Two classes over four archetypes: class 0 draws from {0,1,2}; class 1 may
// also use archetype 3 and always contains it.
SynthSpec default_synth_spec();

void validate(const SynthSpec& spec);

// Archetype means shared by every slide generated from `spec`
// (n_archetypes x d_in); depends only on spec.seed.
Matrix archetype_means(const SynthSpec& spec);

// One synthetic slide of class `cls`. Patches sit on a jittered grid over the
// unit square; each Voronoi cell carries one archetype and patch embeddings
// are the archetype mean plus isotropic Gaussian noise.
PatchBag gen_synthetic_slide(const SynthSpec& spec, int cls, std::uint64_t seed);

// Per-patch archetype index of the slide produced by the same arguments.
std::vector<int> synthetic_archetypes(const SynthSpec& spec, int cls, std::uint64_t seed);

}  // namespace roam::bagio
