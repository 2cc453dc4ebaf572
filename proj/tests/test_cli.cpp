#include <doctest.h>

#include <sstream>

#include "kgmod/cli.hpp"
#include "kgmod/corpus.hpp"
#include "kgmod/serialize.hpp"
#include "support/tmpdir.hpp"

using namespace kgmod;
using testsupport::TempDir;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

const std::string kFixtures = std::string(KGMOD_DATA_DIR) + "/fixtures";

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run_cli({}).code == cli::kExitUsage);
  CHECK(run_cli({"frobnicate"}).code == cli::kExitUsage);
  CHECK(run_cli({"annotate", "--bogus-flag", "x"}).code == cli::kExitUsage);
  CHECK(run_cli({"annotate", "--input"}).code == cli::kExitUsage);
  CHECK(run_cli({"--help"}).code == cli::kExitOk);
}

TEST_CASE("config errors exit 3 and name the key") {
  TempDir tmp("cli3");
  const auto bad_lr = run_cli({"train-transe", "--out-dir", tmp.root(), "--set",
                               "transe.lr=-0.5"});
  CHECK(bad_lr.code == cli::kExitConfig);
  CHECK(bad_lr.err.find("transe.lr") != std::string::npos);

  const auto unknown = run_cli({"annotate", "--out-dir", tmp.root(), "--set",
                                "corpus.nonsense=1"});
  CHECK(unknown.code == cli::kExitConfig);
  CHECK(unknown.err.find("corpus.nonsense") != std::string::npos);

  write_file_text(tmp.path("bad.cfg"), "transe.lr = \n");
  const auto bad_file = run_cli({"train-transe", "--config", tmp.path("bad.cfg")});
  CHECK(bad_file.code == cli::kExitConfig);

  const auto missing = run_cli({"annotate", "--out-dir", tmp.root()});
  CHECK(missing.code == cli::kExitConfig);  // corpus.input required
}

TEST_CASE("config file values load and flags override them") {
  TempDir tmp("clicfg");
  write_file_text(tmp.path("run.cfg"),
                  "# comment line\n"
                  "transe.dim = 24\n"
                  "transe.epochs = 0\n"
                  "seed = 7\n");
  write_file_text(tmp.path("triples.tsv"), "Q1\tP1\tQ2\nQ2\tP1\tQ3\nQ3\tP1\tQ4\n");
  const auto r = run_cli({"train-transe", "--config", tmp.path("run.cfg"), "--out-dir",
                          tmp.root(), "--triples", tmp.path("triples.tsv"), "--set",
                          "transe.dim=16"});
  CHECK(r.code == cli::kExitOk);
  CHECK(r.out.find("config transe.dim = 16") != std::string::npos);  // flag wins
  CHECK(r.out.find("config seed = 7") != std::string::npos);
  CHECK(r.out.find("config transe.lr = 0.01") != std::string::npos);  // default echoed
}

TEST_CASE("annotate reproduces the checked-in expected record and exits 0") {
  TempDir tmp("cliann");
  const auto r = run_cli({"annotate", "--input", kFixtures + "/patent-abstract.wiki", "--titles",
                          kFixtures + "/patent.titles.tsv", "--output",
                          tmp.path("out.jsonl"), "--out-dir", tmp.root()});
  CHECK(r.code == cli::kExitOk);
  CHECK(read_file_text(tmp.path("out.jsonl")) ==
        read_file_text(kFixtures + "/patent.expected.jsonl"));
}

TEST_CASE("data errors exit 4") {
  TempDir tmp("cli4");
  const auto missing = run_cli({"annotate", "--input", tmp.path("nope.wiki"), "--titles",
                                kFixtures + "/patent.titles.tsv", "--out-dir", tmp.root()});
  CHECK(missing.code == cli::kExitData);

  write_file_text(tmp.path("bad.tsv"), "only-one-field\n");
  const auto bad_idx = run_cli({"annotate", "--input", kFixtures + "/patent-abstract.wiki", "--titles",
                                tmp.path("bad.tsv"), "--out-dir", tmp.root()});
  CHECK(bad_idx.code == cli::kExitData);
}

TEST_CASE("stats renders the table for the 3-document fixture") {
  const auto r = run_cli({"stats", "--input", kFixtures + "/stats3.jsonl"});
  CHECK(r.code == cli::kExitOk);
  CHECK(r.out.find("number of texts\t3") != std::string::npos);
  CHECK(r.out.find("words avg\t5") != std::string::npos);
  CHECK(r.out.find("words max\t7") != std::string::npos);
  CHECK(r.out.find("words min\t3") != std::string::npos);
  CHECK(r.out.find("unique entities avg\t1") != std::string::npos);
  CHECK(r.out.find("unique entities max\t2") != std::string::npos);
  CHECK(r.out.find("unique entities min\t0") != std::string::npos);
}

TEST_CASE("train/export roundtrip through checkpoint files") {
  TempDir tmp("clitrain");
  write_file_text(tmp.path("triples.tsv"),
                  "Q1\tP1\tQ2\nQ2\tP1\tQ3\nQ3\tP1\tQ4\nQ4\tP1\tQ5\nQ1\tP2\tQ3\n");
  auto r = run_cli({"train-transe", "--out-dir", tmp.root(), "--triples",
                    tmp.path("triples.tsv"), "--set", "transe.epochs=2", "--set",
                    "transe.dim=8"});
  CHECK(r.code == cli::kExitOk);
  r = run_cli({"export-table", "--out-dir", tmp.root()});
  CHECK(r.code == cli::kExitOk);
  const auto table = kgstore::EntityEmbeddingTable::load(tmp.path("entities.kge"));
  CHECK(table.size() == 5);
  CHECK(table.dim() == 8);
}

TEST_CASE("selftest passes against the shipped fixtures") {
  const auto r = run_cli({"selftest", "--data-dir", KGMOD_DATA_DIR});
  CHECK(r.code == cli::kExitOk);
  CHECK(r.out.find("[FAIL]") == std::string::npos);
  CHECK(r.out.find("[ok]") != std::string::npos);
}

TEST_CASE("eval echoes identical effective config except the mode key") {
  // the config echo precedes any data loading, so bogus paths still show it
  auto echo_lines = [](const std::string& out) {
    std::vector<std::string> lines;
    std::istringstream in(out);
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("config ", 0) == 0 && line.find("eval.mode") == std::string::npos) {
        lines.push_back(line);
      }
    }
    return lines;
  };
  const auto plain = run_cli({"eval", "--dataset", "/nonexistent.csv", "--lm",
                              "/nonexistent.tlm", "--mode", "plain"});
  const auto with_kg = run_cli({"eval", "--dataset", "/nonexistent.csv", "--lm",
                                "/nonexistent.tlm", "--mode", "with_kg"});
  CHECK(plain.code == cli::kExitData);
  CHECK(with_kg.code == cli::kExitData);
  CHECK(plain.out.find("config eval.mode = plain") != std::string::npos);
  CHECK(with_kg.out.find("config eval.mode = with_kg") != std::string::npos);
  CHECK(echo_lines(plain.out) == echo_lines(with_kg.out));
}
