#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "cli_util.hpp"
#include "test_util.hpp"

using namespace dslens;
using namespace dslens::testing;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "dslens_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    const auto r = run_cli("gen --planted default --seed 1 --out '" + (d / "planted.dslw").string() +
                               "' --samples '" + (d / "samples").string() + "' --sample-count 2",
                           d / "gen_log");
    if (r.exit_code != 0) throw std::runtime_error("gen failed: " + r.err);
    return d;
  }();
  return dir;
}

std::string model() { return (work_dir() / "planted.dslw").string(); }

std::string sample(const std::string& name) { return (work_dir() / "samples" / name).string(); }

std::string common() {
  return "--model '" + model() + "' --images '" + sample("overlayed_0.png") + "," + sample("overlayed_1.png") + "'";
}

// Runs `args --out DIR` twice into the same directory and checks that every
// output file is byte-identical.
void expect_deterministic(const std::string& name, const std::string& args) {
  const fs::path out = work_dir() / ("det_" + name);
  std::map<std::string, std::string> first;
  for (int pass = 0; pass < 2; ++pass) {
    fs::remove_all(out);
    const auto r = run_cli(args + " --out '" + out.string() + "'", work_dir() / ("log_" + name));
    ASSERT_EQ(r.exit_code, 0) << r.err;
    if (pass == 0) first = snapshot(out);
    else EXPECT_EQ(snapshot(out), first) << name;
  }
  EXPECT_FALSE(first.empty());
  EXPECT_TRUE(first.count("config.txt")) << name;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    rows.emplace_back();
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) rows.back().push_back(cell);
    if (!line.empty() && line.back() == ',') rows.back().push_back("");
  }
  return rows;
}

}  // namespace

TEST(Cli, InvalidShapeNamesTheConstraint) {
  const auto r = run_cli("gen --heads 5 --out '" + (work_dir() / "bad.dslw").string() + "'", work_dir() / "log_bad");
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.err.find("must divide d_model"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(work_dir() / "bad.dslw"));
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run_cli("lens --model /nonexistent/m.dslw --images x.png --out /tmp/x", work_dir() / "log_e1").exit_code, 3);
  EXPECT_EQ(run_cli("lens --model '" + model() + "' --images /nonexistent.png --out '" +
                        (work_dir() / "e2").string() + "'",
                    work_dir() / "log_e2")
                .exit_code,
            3);
  EXPECT_EQ(run_cli("lens --bogus", work_dir() / "log_e3").exit_code, 1);
  EXPECT_EQ(run_cli("", work_dir() / "log_e4").exit_code, 1);
  const auto bad_site = run_cli("lens " + common() + " --site 9:0 --out '" + (work_dir() / "e6").string() + "'",
                                work_dir() / "log_e6");
  EXPECT_EQ(bad_site.exit_code, 1);
  EXPECT_NE(bad_site.err.find("L9"), std::string::npos) << bad_site.err;
  const fs::path cfg = work_dir() / "bad_config.txt";
  write_file_text(cfg.string(), "alpah = 3\n");
  const auto bad_key = run_cli("lens --config '" + cfg.string() + "'", work_dir() / "log_e7");
  EXPECT_EQ(bad_key.exit_code, 1);
  EXPECT_NE(bad_key.err.find("alpah"), std::string::npos);
}

TEST(Cli, GenIsDeterministic) {
  std::map<std::string, std::string> first;
  for (int pass = 0; pass < 2; ++pass) {
    const fs::path out = work_dir() / "det_gen";
    fs::remove_all(out);
    const auto r = run_cli("gen --seed 4 --layers 2 --d-model 32 --heads 2 --out '" + (out / "m.dslw").string() +
                               "' --samples '" + (out / "samples").string() + "' --sample-count 1",
                           work_dir() / "log_gen");
    ASSERT_EQ(r.exit_code, 0) << r.err;
    if (pass == 0) first = snapshot(out);
    else EXPECT_EQ(snapshot(out), first);
  }
  EXPECT_EQ(first.size(), 4u);
  EXPECT_EQ(load_weights((work_dir() / "det_gen" / "m.dslw").string()).config.d_head, 16u);
}

TEST(Cli, LensIsDeterministicAndFindsThePlantedHead) {
  expect_deterministic("lens", "lens " + common() + " --top-k 3");
  const fs::path out = work_dir() / "det_lens";
  EXPECT_TRUE(fs::exists(out / "summary.json"));
  EXPECT_TRUE(fs::exists(out / "decoded" / "img0_input.png"));
  const auto rows = read_csv(out / "lens.csv");
  ASSERT_EQ(rows.size(), 1u + 2 * 16);
  EXPECT_EQ(rows[0][2], "site");
  const std::set<std::string> planted{"L2H1", "L3H2"};
  for (const auto& row : rows)
    if (row[7] == "1") EXPECT_TRUE(planted.count(row[2])) << row[2];
  std::size_t decoded = 0;
  for (const auto& e : fs::directory_iterator(out / "decoded")) decoded += e.path().extension() == ".png";
  EXPECT_EQ(decoded, 2u * (3 + 1));
}

TEST(Cli, AlphaZeroScoresEverySiteAsTheCorruptedRun) {
  const fs::path out = work_dir() / "alpha0";
  const auto r = run_cli("lens " + common() + " --alpha 0 --out '" + out.string() + "'", work_dir() / "log_a0");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.err.find("warning: alpha"), std::string::npos);
  const auto rows = read_csv(out / "lens.csv");
  std::map<std::string, std::set<std::string>> per_image;
  for (std::size_t i = 1; i < rows.size(); ++i) per_image[rows[i][0]].insert(rows[i][6]);
  for (const auto& [img, sims] : per_image) EXPECT_EQ(sims.size(), 1u) << img;
}

TEST(Cli, Eval1IsDeterministic) {
  expect_deterministic("eval1", "eval1 " + common());
  EXPECT_NE(slurp(work_dir() / "det_eval1" / "summary.json").find("pearson_r"), std::string::npos);
}

TEST(Cli, Eval2IsDeterministic) {
  expect_deterministic("eval2", "eval2 --model '" + model() + "' --images '" + sample("base_0.png") +
                                    "' --repeats 3 --seed 5");
  const auto rows = read_csv(work_dir() / "det_eval2" / "trajectories.csv");
  EXPECT_EQ(rows[0], (std::vector<std::string>{"image", "strategy", "repeat", "step", "sim_to_original",
                                               "sim_to_overlayed"}));
  EXPECT_TRUE(fs::exists(work_dir() / "det_eval2" / "img0_selection_dsl.txt"));
}

TEST(Cli, Eval2WithEmptySelection) {
  const fs::path sel = work_dir() / "empty_selection.txt";
  write_file_text(sel.string(), "# no heads\n");
  const fs::path out = work_dir() / "eval2_empty";
  const auto r = run_cli("eval2 --model '" + model() + "' --images '" + sample("base_0.png") + "' --selection '" +
                             sel.string() + "' --repeats 2 --out '" + out.string() + "'",
                         work_dir() / "log_empty");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  std::size_t dsl_points = 0, random_points = 0;
  for (const auto& row : read_csv(out / "trajectories.csv")) {
    if (row[1] == "dsl") {
      ++dsl_points;
      EXPECT_EQ(row[3], "0");
      EXPECT_EQ(row[5], "1");
    }
    random_points += row[1] == "random";
  }
  EXPECT_EQ(dsl_points, 1u);
  EXPECT_EQ(random_points, 2u);
}

TEST(Cli, ExportAndDecodeAreDeterministic) {
  expect_deterministic("export", "export " + common() + " --site 2:1 --site 1:mlp");
  const fs::path exp = work_dir() / "det_export";
  EXPECT_TRUE(fs::exists(exp / "img1_L2H1.dsle"));
  EXPECT_TRUE(fs::exists(exp / "img0_input.dsle"));
  const Tensor e = import_embedding((exp / "img0_L2H1.dsle").string(), 32);
  EXPECT_EQ(e.numel(), 32u);

  expect_deterministic("decode", "decode --model '" + model() + "' --embeddings '" +
                                     (exp / "img0_L2H1.dsle").string() + "," + (exp / "img0_input.dsle").string() +
                                     "'");
  EXPECT_TRUE(fs::exists(work_dir() / "det_decode" / "img0_L2H1.png"));

  // Embedding width that does not match the model.
  const fs::path small = work_dir() / "small.dsle";
  export_embedding(Tensor({8}), small.string());
  const auto r = run_cli("decode --model '" + model() + "' --embeddings '" + small.string() + "' --out '" +
                             (work_dir() / "dec_bad").string() + "'",
                         work_dir() / "log_dec");
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.err.find("d_embed"), std::string::npos) << r.err;
}

TEST(Cli, ConfigFileReplaysARun) {
  const fs::path a = work_dir() / "replay_a", b = work_dir() / "replay_b";
  ASSERT_EQ(run_cli("eval1 " + common() + " --sites 2:1,0:0 --out '" + a.string() + "'", work_dir() / "log_r1").exit_code, 0);
  ASSERT_EQ(run_cli("eval1 --config '" + (a / "config.txt").string() + "' --out '" + b.string() + "'",
                    work_dir() / "log_r2")
                .exit_code,
            0);
  EXPECT_EQ(slurp(a / "eval1.csv"), slurp(b / "eval1.csv"));
}
