#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kData = OMGSEG_TEST_DATA;

int run(const std::string& args) {
  const std::string cmd = std::string(OMGSEG_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  Cli() : dir(fs::temp_directory_path() / ("omgseg_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()))) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Cli() override { fs::remove_all(dir); }
  fs::path dir;
};

}  // namespace

TEST_F(Cli, UsageAndConfigErrorsExitTwo) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("gen-data"), 2);
  EXPECT_EQ(run("params --config " + (kData / "bad_key.json").string()), 2);
  EXPECT_EQ(run("gen-data --config " + (kData / "bad_key.json").string() + " --out " + dir.string()), 2);
  EXPECT_FALSE(fs::exists(dir / "manifest.json"));
  EXPECT_EQ(run("params --config " + (kData / "smoke.json").string()), 0);
}

TEST_F(Cli, RuntimeErrorsExitOne) {
  const auto cfg = (kData / "smoke.json").string();
  EXPECT_EQ(run("train --config " + cfg + " --data " + (dir / "missing").string() + " --out " + (dir / "run").string()), 1);
  EXPECT_EQ(run("eval --config " + cfg + " --data " + dir.string() + " --checkpoint " + (dir / "none.omgck").string() +
                " --out " + (dir / "eval").string()),
            1);
}

TEST_F(Cli, GenTrainEvalIsDeterministic) {
  const auto cfg = (kData / "smoke.json").string();
  auto pipeline = [&](const fs::path& root, const std::string& seed) {
    EXPECT_EQ(run("gen-data --config " + cfg + seed + " --out " + (root / "data").string()), 0);
    EXPECT_EQ(run("train --config " + cfg + seed + " --data " + (root / "data").string() + " --out " + (root / "run").string()), 0);
    EXPECT_EQ(run("eval --config " + cfg + seed + " --data " + (root / "data").string() + " --source img --checkpoint " +
                  (root / "run" / "model.omgck").string() + " --out " + (root / "eval").string()),
              0);
    EXPECT_EQ(run("infer --config " + cfg + seed + " --data " + (root / "data").string() + " --source img --checkpoint " +
                  (root / "run" / "model.omgck").string() + " --out " + (root / "pred").string()),
              0);
    EXPECT_EQ(run("eval --config " + cfg + seed + " --data " + (root / "data").string() + " --source img --pred " +
                  (root / "pred").string() + " --out " + (root / "eval_pred").string()),
              0);
    return slurp(root / "eval" / "metrics.json");
  };
  const auto a = pipeline(dir / "a", " --seed 5");
  const auto b = pipeline(dir / "b", " --seed 5");
  const auto c = pipeline(dir / "c", " --seed 6");
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  EXPECT_EQ(slurp(dir / "a" / "eval_pred" / "metrics.json"), a);
  const auto train_manifest = json::parse(slurp(dir / "a" / "run" / "manifest.json"));
  EXPECT_EQ(train_manifest.at("backbone_checksum_before"), train_manifest.at("backbone_checksum_after"));
  EXPECT_EQ(train_manifest.at("config").at("model").at("seed"), 5);
  EXPECT_EQ(json::parse(slurp(dir / "c" / "run" / "manifest.json")).at("config").at("model").at("seed"), 6);
  EXPECT_NE(slurp(dir / "a" / "run" / "manifest.json"), slurp(dir / "c" / "run" / "manifest.json"));
  const auto data_manifest = json::parse(slurp(dir / "a" / "data" / "manifest.json"));
  EXPECT_FALSE(data_manifest.at("files").empty());
}
