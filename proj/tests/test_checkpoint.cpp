#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "omgseg/checkpoint.hpp"
#include "omgseg/inference.hpp"
#include "omgseg/metrics.hpp"
#include "omgseg/synthdata.hpp"

using namespace omgseg;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.dim = 16;
  c.num_queries = 5;
  c.num_layers = 3;
  c.heads = 2;
  c.pixel_ffn = 16;
  c.decoder_ffn = 24;
  c.backbone_channels = {16, 12, 8};
  c.seed = 5;
  return c;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

class CheckpointTest : public ::testing::Test {
 protected:
  CheckpointTest() : model(tiny()) {
    dir = fs::temp_directory_path() / ("omgseg_ck_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                       "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir);
    // perturb trainable weights so the file differs from a fresh init
    Rng rng(1);
    for (auto* p : model.params().all())
      if (p->trainable)
        for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += 0.01 * rng.normal();
  }
  ~CheckpointTest() override { fs::remove_all(dir); }

  OmgSegModel model;
  fs::path dir;
};

}  // namespace

TEST_F(CheckpointTest, RoundTripIsBitwise) {
  const auto path = dir / "m.ckpt";
  save_checkpoint(path, model, {{"steps", 3}});
  const auto loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.manifest.meta.at("steps"), 3);
  EXPECT_EQ(loaded.model.params().checksum(), model.params().checksum());
  EXPECT_EQ(model_hash(loaded.model), model_hash(model));
  for (const auto* p : model.params().all()) {
    const auto& q = loaded.model.params().get(p->name);
    EXPECT_EQ(q.value, p->value) << p->name;
    EXPECT_EQ(q.trainable, p->trainable) << p->name;
  }
  EXPECT_EQ(nlohmann::json(loaded.model.config()), nlohmann::json(model.config()));
}

TEST_F(CheckpointTest, ReloadedModelGivesIdenticalMetrics) {
  const auto path = dir / "m.ckpt";
  save_checkpoint(path, model);
  const auto loaded = load_checkpoint(path);
  ShapeWorldConfig sw;
  sw.height = 64;
  sw.width = 64;
  const auto vocab = full_vocabulary(sw);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto scene = gen_image_sample(sw, seed);
    const auto a = model.forward(scene.frames, {}, model.embeddings(vocab).class_rows, DecodeMode::image);
    const auto b = loaded.model.forward(scene.frames, {}, loaded.model.embeddings(vocab).class_rows, DecodeMode::image);
    EXPECT_EQ(a.final_layer().mask_logits, b.final_layer().mask_logits);
    EXPECT_EQ(a.final_layer().class_logits, b.final_layer().class_logits);
    const auto ma = panoptic_merge(a, vocab), mb = panoptic_merge(b, vocab);
    EXPECT_EQ(ma.frames, mb.frames);
    EXPECT_EQ(pq(ma.frames[0], scene.image_targets(), vocab).value, pq(mb.frames[0], scene.image_targets(), vocab).value);
  }
}

TEST_F(CheckpointTest, CorruptionIsDetected) {
  const auto path = dir / "m.ckpt";
  save_checkpoint(path, model);
  const auto good = read_bytes(path);

  auto flipped = good;
  flipped[flipped.size() - 3] = static_cast<char>(flipped[flipped.size() - 3] ^ 0x10);
  write_bytes(path, flipped);
  EXPECT_THROW(load_checkpoint(path), DataError);

  write_bytes(path, good.substr(0, good.size() - 8));
  EXPECT_THROW(load_checkpoint(path), DataError);

  write_bytes(path, good + "x");
  EXPECT_THROW(load_checkpoint(path), DataError);

  auto magic = good;
  magic[0] = 'X';
  write_bytes(path, magic);
  EXPECT_THROW(load_checkpoint(path), DataError);

  write_bytes(path, good.substr(0, 10));
  EXPECT_THROW(load_checkpoint(path), DataError);

  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), DataError);
}

TEST_F(CheckpointTest, ConfigTamperingIsDetected) {
  const auto path = dir / "m.ckpt";
  save_checkpoint(path, model);
  auto bytes = read_bytes(path);
  // "heads":2 -> "heads":4 keeps the manifest length unchanged
  const auto at = bytes.find("\"heads\":2");
  ASSERT_NE(at, std::string::npos);
  bytes[at + 8] = '4';
  write_bytes(path, bytes);
  EXPECT_THROW(load_checkpoint(path), DataError);
}

TEST_F(CheckpointTest, ManifestDescribesArrays) {
  const auto path = dir / "m.ckpt";
  save_checkpoint(path, model);
  const auto m = read_manifest(path);
  EXPECT_EQ(m.entries.size(), model.params().size());
  EXPECT_EQ(m.config_hash, config_hash(model.config()));
  std::uint64_t offset = 0;
  for (const auto& e : m.entries) {
    EXPECT_EQ(e.offset, offset);
    const auto& p = model.params().get(e.name);
    ASSERT_EQ(e.shape.size(), 2u);
    EXPECT_EQ(e.shape[0], p.value.rows());
    EXPECT_EQ(e.shape[1], p.value.cols());
    offset += static_cast<std::uint64_t>(p.value.size()) * 8;
  }
  EXPECT_EQ(config_hash(model.config()).size(), 16u);
}
