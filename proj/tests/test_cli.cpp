#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "msme/cli.hpp"

using namespace msme;
namespace fs = std::filesystem;

namespace {

int run(std::initializer_list<std::string> args) {
  return cli::run_command(std::vector<std::string>(args));
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct Workspace {
  fs::path root;
  Workspace() {
    root = fs::temp_directory_path() / "msme_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
  std::string p(const std::string& rel) const { return (root / rel).string(); }
};

}  // namespace

TEST_CASE("cli end to end") {
  Workspace ws;

  // small dataset: 56x56 samples tile exactly once at the default geometry
  REQUIRE(run({"generate-data", "--out", ws.p("data"), "--k", "3", "--samples", "8", "--size",
               "56", "--seed", "5"}) == 0);
  REQUIRE(fs::exists(ws.p("data/manifest.json")));
  REQUIRE(fs::exists(ws.p("data/config.resolved")));

  SECTION("same generate flags produce byte-identical datasets") {
    REQUIRE(run({"generate-data", "--out", ws.p("data2"), "--k", "3", "--samples", "8", "--size",
                 "56", "--seed", "5"}) == 0);
    CHECK(slurp(ws.p("data/s3_channels.bin")) == slurp(ws.p("data2/s3_channels.bin")));
    CHECK(slurp(ws.p("data/manifest.json")) == slurp(ws.p("data2/manifest.json")));
  }

  SECTION("refuses to overwrite a non-empty directory without --force") {
    CHECK(run({"generate-data", "--out", ws.p("data"), "--k", "3"}) == 2);
    CHECK(run({"generate-data", "--out", ws.p("data"), "--k", "3", "--samples", "4", "--size",
               "56", "--force"}) == 0);
  }

  SECTION("train/eval are deterministic and honor config-vs-flag precedence") {
    std::ofstream cfg(ws.p("train.cfg"));
    cfg << "model = ms\nepochs = 2\nlr = 0.01\n";
    cfg.close();

    for (const char* dir : {"runA", "runB"})
      REQUIRE(run({"train", "--config", ws.p("train.cfg"), "--data", ws.p("data"), "--out",
                   ws.p(dir), "--seed", "9"}) == 0);
    CHECK(slurp(ws.p("runA/model.weights")) == slurp(ws.p("runB/model.weights")));
    CHECK(slurp(ws.p("runA/model.meta")) == slurp(ws.p("runB/model.meta")));
    CHECK(slurp(ws.p("runA/log.csv")) == slurp(ws.p("runB/log.csv")));
    // the snapshot records effective values (out differs by design)
    std::string snapA = slurp(ws.p("runA/config.resolved"));
    CHECK(snapA.find("epochs=2") != std::string::npos);
    CHECK(snapA.find("lr=0.01") != std::string::npos);
    CHECK(snapA.find("folds=4") != std::string::npos);  // captured default

    // flags override the config file: 1 epoch instead of 2
    REQUIRE(run({"train", "--config", ws.p("train.cfg"), "--data", ws.p("data"), "--out",
                 ws.p("runC"), "--seed", "9", "--epochs", "1"}) == 0);
    std::string log = slurp(ws.p("runC/log.csv"));
    CHECK(std::count(log.begin(), log.end(), '\n') == 2);  // header + one epoch

    // resolved snapshot carries the effective value
    std::string snap = slurp(ws.p("runC/config.resolved"));
    CHECK(snap.find("epochs=1") != std::string::npos);

    for (const char* dir : {"evalA", "evalB"})
      REQUIRE(run({"eval", "--data", ws.p("data"), "--checkpoint", ws.p("runA/model"), "--out",
                   ws.p(dir), "--jobs", "2"}) == 0);
    CHECK(slurp(ws.p("evalA/metrics.csv")) == slurp(ws.p("evalB/metrics.csv")));

    auto table = MetricTable::load_csv(ws.p("evalA/metrics.csv"));
    CHECK(table.size() == 7);  // K=3: all combinations
  }

  SECTION("unknown config keys abort before any computation") {
    std::ofstream cfg(ws.p("bad.cfg"));
    cfg << "epochs = 2\nnot_a_key = 1\n";
    cfg.close();
    CHECK(run({"train", "--config", ws.p("bad.cfg"), "--data", ws.p("data"), "--out",
               ws.p("badrun")}) == 2);
    CHECK(!fs::exists(ws.p("badrun/model.weights")));
  }

  SECTION("exit codes distinguish config and data errors") {
    CHECK(run({"train", "--data", ws.p("missing"), "--out", ws.p("r")}) == 3);
    CHECK(run({"train", "--data", ws.p("data")}) == 2);  // --out missing
    CHECK(run({"no-such-command"}) == 2);
    REQUIRE(run({"train", "--data", ws.p("data"), "--out", ws.p("r1"), "--epochs", "1"}) == 0);
    // combination names a marker outside the dataset
    CHECK(run({"eval", "--data", ws.p("data"), "--checkpoint", ws.p("r1/model"), "--out",
               ws.p("e1"), "--combinations", "14"}) == 3);
  }

  SECTION("ub training covers M_UB and eval reports skipped combinations") {
    std::ofstream case_file(ws.p("case.txt"));
    case_file << "1\n2\n3\n12\n13\n";  // singletons and pairs over 5 train slots
    case_file.close();
    REQUIRE(run({"train", "--data", ws.p("data"), "--out", ws.p("ub"), "--model", "ub",
                 "--epochs", "1", "--case-file", ws.p("case.txt"), "--jobs", "2"}) == 0);
    // subsets of {1},{2},{3},{1,2},{1,3}: m_1 m_2 m_3 m_12 m_13 trainable, m_23 m_123 not
    CHECK(fs::exists(ws.p("ub/member_1.meta")));
    CHECK(fs::exists(ws.p("ub/member_12.meta")));
    CHECK(!fs::exists(ws.p("ub/member_23.meta")));
    CHECK(!fs::exists(ws.p("ub/member_123.meta")));
    std::string skipped = slurp(ws.p("ub/ub_skipped.txt"));
    CHECK(skipped.find("m_23") != std::string::npos);
    CHECK(skipped.find("m_123") != std::string::npos);

    REQUIRE(run({"eval", "--data", ws.p("data"), "--ensemble-dir", ws.p("ub"), "--out",
                 ws.p("ubeval")}) == 0);
    auto table = MetricTable::load_csv(ws.p("ubeval/metrics.csv"));
    CHECK(table.size() == 5);  // exactly M_UB
    std::string rep = slurp(ws.p("ubeval/eval_report.txt"));
    CHECK(rep.find("skipped m_123") != std::string::npos);
  }

  SECTION("infeasible case file quotes M_total") {
    std::ofstream case_file(ws.p("infeasible.txt"));
    case_file << "1\n2\n12\n";  // marker 3 never present
    case_file.close();
    CHECK(run({"train", "--data", ws.p("data"), "--out", ws.p("bad"), "--case-file",
               ws.p("infeasible.txt")}) == 3);
  }

  SECTION("segment, quantify, compare, report") {
    REQUIRE(run({"train", "--data", ws.p("data"), "--out", ws.p("m"), "--model", "ms-me",
                 "--epochs", "2", "--lr", "0.01", "--seed", "3"}) == 0);
    REQUIRE(run({"segment", "--data", ws.p("data"), "--checkpoint", ws.p("m/model"), "--out",
                 ws.p("seg"), "--jobs", "2"}) == 0);
    CHECK(fs::exists(ws.p("seg/predictions.json")));
    CHECK(fs::exists(ws.p("seg/s0_pred.bin")));
    CHECK(fs::file_size(ws.p("seg/s0_pred.bin")) == 56 * 56);

    REQUIRE(run({"quantify", "--data", ws.p("data"), "--pred-dir", ws.p("seg"), "--out",
                 ws.p("q"), "--group-a", "s0,s1,s2,s3", "--group-b", "s4,s5,s6,s7"}) == 0);
    std::string qrep = slurp(ws.p("q/report.txt"));
    CHECK(qrep.find("Mann-Whitney") != std::string::npos);
    CHECK(qrep.find("marker availability") != std::string::npos);
    CHECK(fs::exists(ws.p("q/occupancy.csv")));

    REQUIRE(run({"eval", "--data", ws.p("data"), "--checkpoint", ws.p("m/model"), "--out",
                 ws.p("em")}) == 0);
    // a table against itself: degenerate comparison flagged
    REQUIRE(run({"compare", "--a", ws.p("em/metrics.csv"), "--b", ws.p("em/metrics.csv"),
                 "--out", ws.p("cmp")}) == 0);
    std::string crep = slurp(ws.p("cmp/report.txt"));
    CHECK(crep.find("degenerate") != std::string::npos);

    REQUIRE(run({"report", "--table", ws.p("em/metrics.csv"), "--recalibration", ws.p("m/model"),
                 "--complexity", ws.p("m/model"), "--out", ws.p("rep")}) == 0);
    std::string rrep = slurp(ws.p("rep/report.txt"));
    CHECK(rrep.find("recalibration") != std::string::npos);
    CHECK(rrep.find("parameters") != std::string::npos);
    CHECK(rrep.find("ms-me") != std::string::npos);
  }

  SECTION("quantify with a dedicated tissue checkpoint") {
    // unknown flags abort with a config error
    REQUIRE(run({"train", "--data", ws.p("data"), "--out", ws.p("tiss"), "--model", "ub",
                 "--epochs", "1", "--not-a-flag"}) == 2);
    // tissue source: a single-marker member model
    REQUIRE(run({"train", "--data", ws.p("data"), "--out", ws.p("m2"), "--model", "ms",
                 "--epochs", "1"}) == 0);
    REQUIRE(run({"train", "--data", ws.p("data"), "--out", ws.p("tism"), "--model", "ub",
                 "--epochs", "1"}) == 0);
    REQUIRE(run({"quantify", "--data", ws.p("data"), "--checkpoint", ws.p("m2/model"),
                 "--tissue-checkpoint", ws.p("tism/member_1"), "--out", ws.p("q2")}) == 0);
    CHECK(fs::exists(ws.p("q2/occupancy.csv")));
  }
}
