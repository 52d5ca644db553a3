#include "roam/bagio.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <algorithm>
#include <cstring>
#include <limits>
#include <set>

using namespace roam;
using namespace roam::bagio;
using roam::testing::TempDir;

namespace {

PatchBag random_bag(std::mt19937_64& rng, int n, int d, int label) {
  PatchBag bag;
  bag.slide_id = "b";
  bag.embeddings = roam::testing::f32_matrix(rng, n, d);
  bag.coords = roam::testing::f32_matrix(rng, n, 2);
  bag.label = label;
  return bag;
}

void expect_same(const PatchBag& a, const PatchBag& b) {
  EXPECT_EQ(a.label, b.label);
  ASSERT_EQ(a.embeddings.rows(), b.embeddings.rows());
  ASSERT_EQ(a.embeddings.cols(), b.embeddings.cols());
  EXPECT_TRUE(a.embeddings == b.embeddings);
  EXPECT_TRUE(a.coords == b.coords);
}

BagErrorCode decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_bag(bytes);
  } catch (const BagError& e) {
    return e.code();
  }
  ADD_FAILURE() << "decode succeeded";
  return BagErrorCode::kIo;
}

}  // namespace

TEST(BagIo, SinglePatchRoundtrip) {
  TempDir dir("bag1");
  PatchBag bag;
  bag.embeddings = Matrix::Zero(1, 4);
  bag.embeddings << 1.5, -2.0, 0.25, 3.0;
  bag.coords = Matrix::Zero(1, 2);
  bag.label = 0;
  write_bag(bag, dir / "one.bag");
  const PatchBag back = read_bag(dir / "one.bag");
  expect_same(bag, back);
  EXPECT_EQ(back.slide_id, "one");
}

TEST(BagIo, BadMagic) {
  std::mt19937_64 rng(1);
  auto bytes = encode_bag(random_bag(rng, 3, 2, 1));
  for (int i = 0; i < 8; ++i) bytes[i] = 'X';
  EXPECT_EQ(decode_error(bytes), BagErrorCode::kBadMagic);
}

TEST(BagIo, DistinctErrors) {
  std::mt19937_64 rng(2);
  const auto good = encode_bag(random_bag(rng, 5, 3, 0));

  auto truncated = good;
  truncated.resize(truncated.size() - 4);
  EXPECT_EQ(decode_error(truncated), BagErrorCode::kTruncated);

  auto short_header = good;
  short_header.resize(20);
  EXPECT_EQ(decode_error(short_header), BagErrorCode::kTruncated);

  auto version = good;
  version[8] = 2;
  EXPECT_EQ(decode_error(version), BagErrorCode::kUnsupportedVersion);

  auto extra = good;
  extra.push_back(0);
  extra.push_back(0);
  extra.push_back(0);
  extra.push_back(0);
  EXPECT_EQ(decode_error(extra), BagErrorCode::kDimensionMismatch);

  auto nan = good;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + kBagHeaderBytes, &q, 4);
  EXPECT_EQ(decode_error(nan), BagErrorCode::kNonFinite);
}

TEST(BagIo, MissingFile) {
  try {
    read_bag("/nonexistent/dir/x.bag");
    FAIL();
  } catch (const BagError& e) {
    EXPECT_EQ(e.code(), BagErrorCode::kIo);
  }
}

TEST(BagIo, LargeBagFileSize) {
  TempDir dir("big");
  std::mt19937_64 rng(3);
  const PatchBag bag = random_bag(rng, 4096, 512, 1);
  write_bag(bag, dir / "big.bag");
  EXPECT_EQ(std::filesystem::file_size(dir / "big.bag"), 40u + 4u * 4096u * (512u + 2u));
  expect_same(bag, read_bag(dir / "big.bag"));
}

TEST(BagIo, RoundtripProperty) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> n(1, 60), d(1, 20), lab(0, 5);
  for (int trial = 0; trial < 50; ++trial) {
    const PatchBag bag = random_bag(rng, n(rng), d(rng), lab(rng));
    expect_same(bag, decode_bag(encode_bag(bag)));
  }
}

TEST(BagIo, HeaderLayout) {
  std::mt19937_64 rng(5);
  const auto bytes = encode_bag(random_bag(rng, 3, 2, 7));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "ROAMBAG1");
  std::uint32_t n = 0, d = 0;
  std::int32_t label = 0;
  std::memcpy(&n, bytes.data() + 12, 4);
  std::memcpy(&d, bytes.data() + 16, 4);
  std::memcpy(&label, bytes.data() + 20, 4);
  EXPECT_EQ(n, 3u);
  EXPECT_EQ(d, 2u);
  EXPECT_EQ(label, 7);
  for (int i = 24; i < 40; ++i) EXPECT_EQ(bytes[i], 0);
}

TEST(BagIo, InvalidBagRejected) {
  PatchBag bag;
  bag.embeddings = Matrix::Zero(0, 3);
  bag.coords = Matrix::Zero(0, 2);
  EXPECT_THROW(validate(bag), InvalidArgument);
  bag.embeddings = Matrix::Zero(2, 3);
  bag.coords = Matrix::Zero(3, 2);
  EXPECT_THROW(validate(bag), InvalidArgument);
  bag.coords = Matrix::Zero(2, 2);
  bag.coords(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(encode_bag(bag), InvalidArgument);
}

TEST(Subsample, NoOpWhenSmall) {
  std::mt19937_64 rng(6);
  const PatchBag bag = random_bag(rng, 100, 4, 1);
  expect_same(bag, subsample_bag(bag, 4096, 9));
}

TEST(Subsample, KeepsRowPairs) {
  std::mt19937_64 rng(7);
  PatchBag bag = random_bag(rng, 5000, 3, 0);
  for (int i = 0; i < 5000; ++i) bag.coords(i, 0) = i;
  const PatchBag sub = subsample_bag(bag, 4096, 11);
  ASSERT_EQ(sub.size(), 4096);
  std::set<int> seen;
  for (Eigen::Index i = 0; i < sub.size(); ++i) {
    const int src = static_cast<int>(sub.coords(i, 0));
    ASSERT_GE(src, 0);
    ASSERT_LT(src, 5000);
    EXPECT_TRUE(seen.insert(src).second);
    EXPECT_TRUE(sub.embeddings.row(i) == bag.embeddings.row(src));
    EXPECT_EQ(sub.coords(i, 1), bag.coords(src, 1));
  }
  expect_same(sub, subsample_bag(bag, 4096, 11));
  EXPECT_FALSE(sub.coords == subsample_bag(bag, 4096, 12).coords);
}

TEST(Subsample, RejectsZero) {
  std::mt19937_64 rng(8);
  EXPECT_THROW(subsample_bag(random_bag(rng, 3, 2, 0), 0, 1), InvalidArgument);
}

TEST(Manifest, RoundtripAndRelativePaths) {
  TempDir dir("manifest");
  std::mt19937_64 rng(9);
  std::filesystem::create_directories(dir / "bags");
  DatasetManifest m;
  for (int i = 0; i < 4; ++i) {
    const std::string id = "s" + std::to_string(i);
    write_bag(random_bag(rng, 4, 2, i % 2), dir / ("bags/" + id + ".bag"));
    m.entries.push_back({id, "bags/" + id + ".bag", i % 2, static_cast<Split>(i % 3)});
  }
  write_manifest(m, dir / "manifest.csv");
  const DatasetManifest back = read_manifest(dir / "manifest.csv");
  ASSERT_EQ(back.entries.size(), 4u);
  EXPECT_EQ(back.split(Split::kTrain).size(), 2u);
  EXPECT_EQ(back.split(Split::kVal).size(), 1u);
  for (const auto& e : back.entries) {
    EXPECT_TRUE(std::filesystem::exists(e.path));
    EXPECT_EQ(load_entry(e).slide_id, e.slide_id);
  }
  EXPECT_EQ(roam::testing::read_text(dir / "manifest.csv").substr(0, 23), "slide_id,path,label,spl");
}

TEST(Manifest, Errors) {
  TempDir dir("manifest_err");
  {
    std::ofstream out(dir / "dup.csv");
    out << "slide_id,path,label,split\na,a.bag,0,train\na,b.bag,1,val\n";
  }
  EXPECT_THROW(read_manifest(dir / "dup.csv"), Error);
  {
    std::ofstream out(dir / "hdr.csv");
    out << "id,path,label\n";
  }
  EXPECT_THROW(read_manifest(dir / "hdr.csv"), Error);
  {
    std::ofstream out(dir / "split.csv");
    out << "slide_id,path,label,split\na,a.bag,0,holdout\n";
  }
  EXPECT_THROW(read_manifest(dir / "split.csv"), Error);
  EXPECT_THROW(read_manifest(dir / "missing.csv"), Error);
}

TEST(Manifest, LabelConflictWarns) {
  TempDir dir("conflict");
  std::mt19937_64 rng(10);
  write_bag(random_bag(rng, 3, 2, 0), dir / "x.bag");
  ManifestEntry e{"x", dir / "x.bag", 1, Split::kTrain};
  std::vector<std::string> warnings;
  const PatchBag bag = load_entry(e, &warnings);
  EXPECT_EQ(bag.label, 1);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Synth, ZeroNoiseGivesArchetypeMeans) {
  SynthSpec spec = default_synth_spec();
  spec.noise_scale = 0.0;
  const Matrix means = archetype_means(spec);
  const PatchBag bag = gen_synthetic_slide(spec, 1, 42);
  const auto arche = synthetic_archetypes(spec, 1, 42);
  ASSERT_EQ(static_cast<Eigen::Index>(arche.size()), bag.size());
  for (Eigen::Index i = 0; i < bag.size(); ++i) {
    EXPECT_TRUE(bag.embeddings.row(i) == means.row(arche[i]));
  }
}

TEST(Synth, SingleCellSharesArchetype) {
  SynthSpec spec = default_synth_spec();
  spec.min_cells = 1;
  spec.max_cells = 1;
  spec.class_rules[1].required.clear();
  for (int s = 0; s < 10; ++s) {
    const auto arche = synthetic_archetypes(spec, s % 2, s);
    for (int a : arche) EXPECT_EQ(a, arche.front());
  }
}

TEST(Synth, Deterministic) {
  const SynthSpec spec = default_synth_spec();
  const PatchBag a = gen_synthetic_slide(spec, 0, 5);
  const PatchBag b = gen_synthetic_slide(spec, 0, 5);
  expect_same(a, b);
  EXPECT_FALSE(a.embeddings.rows() == gen_synthetic_slide(spec, 0, 6).embeddings.rows() &&
               a.embeddings == gen_synthetic_slide(spec, 0, 6).embeddings);
}

TEST(Synth, LabelsAndRanges) {
  const SynthSpec spec = default_synth_spec();
  for (int s = 0; s < 10; ++s) {
    const PatchBag bag = gen_synthetic_slide(spec, s % 2, s);
    EXPECT_EQ(bag.label, s % 2);
    EXPECT_GE(bag.size(), spec.min_patches);
    EXPECT_LE(bag.size(), spec.max_patches);
    EXPECT_EQ(bag.dim(), spec.d_in);
    EXPECT_GE(bag.coords.minCoeff(), 0.0);
    EXPECT_LE(bag.coords.maxCoeff(), 1.0);
    const auto arche = synthetic_archetypes(spec, s % 2, s);
    const std::set<int> present(arche.begin(), arche.end());
    for (int a : present) {
      const auto& allowed = spec.class_rules[s % 2].allowed;
      EXPECT_NE(std::find(allowed.begin(), allowed.end(), a), allowed.end());
    }
    for (int r : spec.class_rules[s % 2].required) EXPECT_TRUE(present.count(r));
  }
}

TEST(Synth, InvalidSpec) {
  SynthSpec spec = default_synth_spec();
  EXPECT_THROW(gen_synthetic_slide(spec, 2, 0), InvalidArgument);
  spec.noise_scale = -1.0;
  EXPECT_THROW(validate(spec), InvalidArgument);
  spec = default_synth_spec();
  spec.n_archetypes = 1;
  EXPECT_THROW(validate(spec), InvalidArgument);
  spec = default_synth_spec();
  spec.n_slides_per_class = 0;
  EXPECT_THROW(validate(spec), InvalidArgument);
}

// Independent oracle: nearest class centroid of bag-mean embeddings.
TEST(Synth, BagMeanCentroidClassifierSeparates) {
  const SynthSpec spec = default_synth_spec();
  std::vector<RowVector> train_means[2];
  for (int cls = 0; cls < 2; ++cls)
    for (int s = 0; s < 20; ++s)
      train_means[cls].push_back(gen_synthetic_slide(spec, cls, 100 + s).embeddings.colwise().mean());
  RowVector centroid[2];
  for (int cls = 0; cls < 2; ++cls) {
    centroid[cls] = RowVector::Zero(spec.d_in);
    for (const auto& m : train_means[cls]) centroid[cls] += m;
    centroid[cls] /= static_cast<double>(train_means[cls].size());
  }
  int correct = 0, total = 0;
  for (int cls = 0; cls < 2; ++cls) {
    for (int s = 0; s < 20; ++s) {
      const RowVector m = gen_synthetic_slide(spec, cls, 500 + s).embeddings.colwise().mean();
      const int pred = (m - centroid[0]).squaredNorm() <= (m - centroid[1]).squaredNorm() ? 0 : 1;
      correct += pred == cls;
      ++total;
    }
  }
  EXPECT_GT(static_cast<double>(correct) / total, 0.9);
}
