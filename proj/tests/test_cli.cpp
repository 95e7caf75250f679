#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("dynaflow_cli_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args) const {
    const std::string cmd =
        "cd '" + dir_.string() + "' && '" + DYNAFLOW_CLI + "' " + args + " >>cli.out 2>>cli.err";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }

  void make_data(const std::string& name = "data") const {
    ASSERT_EQ(run("synth --out " + name + " --grid-n 3 --seed 2"), 0);
  }

  void make_model(const std::string& name = "m.ck") const {
    ASSERT_EQ(run("train --data data --out " + name + " --epochs 2 --crop 32 --base-channels 4 --depth 2 --bins 8"), 0);
  }

  // All regular files below a directory, keyed by relative path.
  std::map<std::string, std::string> tree(const fs::path& root) const {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir_ / root))
      if (e.is_regular_file()) out[fs::relative(e.path(), dir_ / root).string()] = slurp(e.path());
    return out;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("bogus"), 2);
  EXPECT_EQ(run("synth"), 2);
  EXPECT_EQ(run("synth --out d --nope"), 2);
  EXPECT_EQ(run("synth --out d --grid-n notanint"), 2);
  make_data();
  EXPECT_EQ(run("rasterize --data data --out r --slot 9:99"), 2);
  EXPECT_EQ(run("eval --data data"), 2);  // neither --checkpoint nor --oracle
  ASSERT_EQ(run("predict --data data --oracle --slots 0:8 --split all --out p"), 0);
  EXPECT_EQ(run("isochrone --data data --from r0c0 --predictions p/speeds_d0_h8.csv --budgets 60,30"), 2);
  EXPECT_EQ(run("isochrone --data data --from r0c0 --predictions p/speeds_d0_h8.csv --budgets 60,abc"), 2);
  EXPECT_EQ(run("synth --help"), 0);
}

TEST_F(Cli, MissingArtifactsExitThree) {
  EXPECT_EQ(run("eval --data nowhere --oracle"), 3);
  make_data();
  EXPECT_EQ(run("eval --data data --checkpoint missing.ck"), 3);
  EXPECT_EQ(run("route --data data --from r0c0 --to r1c1 --predictions none.csv"), 3);
  EXPECT_EQ(run("synth --out d2 --config none.json"), 3);
  fs::remove(dir_ / "data" / "speeds.csv");
  EXPECT_EQ(run("eval --data data --oracle"), 3);
}

TEST_F(Cli, BadReferencesExitFour) {
  make_data();
  EXPECT_EQ(run("route --data data --from nowhere --to r0c0 --weight length"), 4);
  EXPECT_EQ(run("rasterize --data data --out r --slot 0:8 --tile 21_1_1"), 4);
  EXPECT_EQ(run("render --data data --tile 21_1_1 --slot 0:8 --oracle --out r"), 4);
}

TEST_F(Cli, SynthRefusesExistingDirectory) {
  make_data();
  const auto before = tree("data");
  EXPECT_EQ(run("synth --out data --grid-n 3 --seed 2"), 2);
  EXPECT_EQ(tree("data"), before);
  EXPECT_EQ(run("synth --out data --grid-n 3 --seed 5 --force"), 0);
  EXPECT_NE(tree("data"), before);
  EXPECT_EQ(run("synth --out data --grid-n 3 --seed 2 --force"), 0);
  EXPECT_EQ(tree("data"), before);
}

TEST_F(Cli, RerunsAreByteIdentical) {
  make_data("a");
  make_data("b");
  EXPECT_EQ(tree("a"), tree("b"));
  fs::rename(dir_ / "a", dir_ / "data");
  make_model("m1.ck");
  make_model("m2.ck");
  EXPECT_EQ(slurp(dir_ / "m1.ck"), slurp(dir_ / "m2.ck"));
  EXPECT_EQ(slurp(dir_ / "m1.ck.log.csv"), slurp(dir_ / "m2.ck.log.csv"));
  for (int i = 1; i <= 2; ++i) {
    ASSERT_EQ(run("eval --data data --checkpoint m1.ck --out e" + std::to_string(i) + ".csv"), 0);
    ASSERT_EQ(run("predict --data data --checkpoint m1.ck --slots 0:4 --out p" + std::to_string(i)), 0);
  }
  EXPECT_EQ(slurp(dir_ / "e1.csv"), slurp(dir_ / "e2.csv"));
  EXPECT_EQ(tree("p1"), tree("p2"));
}

TEST_F(Cli, PredictionsDependOnTime) {
  make_data();
  make_model();
  ASSERT_EQ(run("predict --data data --checkpoint m.ck --slots 0:4,0:8 --out p"), 0);
  auto rows = [&](const std::string& f) {
    std::ifstream in(dir_ / "p" / f);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "segment_id,day,hour,speed_kmh");
    std::vector<std::pair<std::string, std::string>> out;
    while (std::getline(in, line)) {
      std::stringstream s(line);
      std::string id, d, h, v;
      std::getline(s, id, ',');
      std::getline(s, d, ',');
      std::getline(s, h, ',');
      std::getline(s, v, ',');
      out.emplace_back(id, v);
    }
    return out;
  };
  const auto a = rows("speeds_d0_h4.csv"), b = rows("speeds_d0_h8.csv");
  ASSERT_EQ(a.size(), b.size());
  ASSERT_FALSE(a.empty());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    differs |= a[i].second != b[i].second;
  }
  EXPECT_TRUE(differs);
}

TEST_F(Cli, EvalOracleIsPerfect) {
  make_data();
  ASSERT_EQ(run("eval --data data --oracle --split all --out e.csv"), 0);
  std::ifstream in(dir_ / "e.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "scope,day,hour,rmse,mae,r2,road_f1,orientation_top1,samples");
  EXPECT_EQ(row.rfind("all,,,0,0,1,1,", 0), 0u) << row;
  ASSERT_EQ(run("eval --data data --oracle --policy slots --slots 0:8,5:13 --out s.csv"), 0);
  const auto s = slurp(dir_ / "s.csv");
  EXPECT_NE(s.find("\nslot,0,8,0,0,1,"), std::string::npos) << s;
  EXPECT_NE(s.find("\nslot,5,13,0,0,1,"), std::string::npos) << s;
}

TEST_F(Cli, RoutesIsochronesAndRenders) {
  make_data();
  ASSERT_EQ(run("predict --data data --oracle --slots 0:8 --split all --out p"), 0);
  ASSERT_EQ(run("route --data data --from r0c0 --to r2c2 --weight length --out len.json"), 0);
  ASSERT_EQ(run("route --data data --from r0c0 --to r2c2 --weight time --predictions p/speeds_d0_h8.csv --out t.json"), 0);
  for (const char* f : {"len.json", "t.json"}) {
    const auto doc = nlohmann::json::parse(slurp(dir_ / f));
    const auto nodes = doc["features"][0]["properties"]["nodes"];
    EXPECT_EQ(nodes.front(), "r0c0");
    EXPECT_EQ(nodes.back(), "r2c2");
  }
  ASSERT_EQ(run("isochrone --data data --from r1c1 --budgets 5,10,30 --predictions p/speeds_d0_h8.csv --out iso.json"), 0);
  const auto iso = nlohmann::json::parse(slurp(dir_ / "iso.json"));
  ASSERT_EQ(iso["features"].size(), 3u);
  for (std::size_t i = 1; i < 3; ++i)
    EXPECT_GE(iso["features"][i]["properties"]["nodes"].size(), iso["features"][i - 1]["properties"]["nodes"].size());
  std::string tile;
  for (const auto& e : fs::directory_iterator(dir_ / "data" / "tiles")) tile = e.path().stem().string();
  ASSERT_EQ(run("render --data data --tile " + tile + " --slot 0:8 --oracle --out r1"), 0);
  ASSERT_EQ(run("render --data data --tile " + tile + " --slot 0:8 --oracle --out r2"), 0);
  EXPECT_EQ(tree("r1"), tree("r2"));
  EXPECT_EQ(tree("r1").size(), 3u);
  ASSERT_EQ(run("rasterize --data data --out ras --slot 0:8 --tile " + tile), 0);
  EXPECT_EQ(tree("ras").size(), 4u);
}

TEST_F(Cli, ConfigFileMerge) {
  std::ofstream(dir_ / "c.json") << R"({"grid_n": 3, "seed": 2})";
  ASSERT_EQ(run("synth --out a --config c.json"), 0);
  make_data("b");
  EXPECT_EQ(tree("a"), tree("b"));
  // command-line values win over the file
  ASSERT_EQ(run("synth --out c --config c.json --seed 7"), 0);
  EXPECT_NE(tree("c"), tree("b"));
  std::ofstream(dir_ / "bad.json") << R"({"grid_n": 3, "colour": "red"})";
  EXPECT_EQ(run("synth --out d --config bad.json"), 2);
  // an unreadable config is treated like a broken artifact
  std::ofstream(dir_ / "junk.json") << "{nope";
  EXPECT_EQ(run("synth --out e --config junk.json"), 3);
}
