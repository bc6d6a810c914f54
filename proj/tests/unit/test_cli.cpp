#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "hdlm/csv.hpp"
#include "hdlm/samplers.hpp"
#include "support.hpp"

using namespace hdlm;
namespace fs = std::filesystem;

namespace {

const std::string kBin = HDLM_BIN;

int cli(const std::string& args, const fs::path& log) {
  return test::run(kBin + " " + args + " >" + (log.string() + ".out") + " 2>" + log.string());
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string s;
  std::getline(in, s);
  return s;
}

std::size_t data_rows(const fs::path& p) {
  std::ifstream in(p);
  return read_csv(in).rows.size();
}

// Simulated data plus one tdlm and one nested fit, shared by the tests below.
struct Fixture {
  fs::path dir = test::scratch_dir("cli");
  fs::path sim = dir / "sim";
  std::string fit_args;

  Fixture() {
    REQUIRE(cli("simulate --scenario 1 --n 120 --sigma2 10 --seed 7 --lags 26 --out " + sim.string(),
                 dir / "sim.log") == 0);
    fit_args = "fit --data " + (sim / "data.csv").string() + " --schema " + (sim / "schema.txt").string() +
               " --exposures x1..x26 --fixed z1..z13 --intercept true --iterations 60 --burn-in 20 --thin 2"
               " --trees 3 --set progress_every=0 --set min_leaf=10";
  }
  ~Fixture() { if (!std::getenv("HDLM_KEEP_SCRATCH")) fs::remove_all(dir); }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("simulate is byte-identical across reruns") {
  auto& f = fixture();
  const fs::path a = f.dir / "a", b = f.dir / "b";
  for (const auto& d : {a, b})
    REQUIRE(cli("simulate --scenario 1 --n 100 --sigma2 10 --seed 7 --out " + d.string(), f.dir / "s.log") == 0);
  for (const char* file : {"data.csv", "data_truth.csv", "schema.txt"})
    CHECK(test::slurp(a / file) == test::slurp(b / file));
  CHECK(data_rows(a / "data.csv") == 100);
  CHECK(data_rows(a / "data_truth.csv") == 100 * 37);
}

TEST_CASE("unknown scenario is a usage error") {
  auto& f = fixture();
  CHECK(cli("simulate --scenario 4 --out " + (f.dir / "bad").string(), f.dir / "bad.log") == 2);
  const std::string err = test::slurp(f.dir / "bad.log");
  CHECK(err.rfind("error kind=usage message=", 0) == 0);
  CHECK(std::count(err.begin(), err.end(), '\n') == 1);
}

TEST_CASE("truth file header matches the golden file") {
  auto& f = fixture();
  const std::string golden = test::slurp(fs::path(HDLM_FIXTURES) / "truth_header.golden");
  const std::string truth = test::slurp(f.sim / "data_truth.csv");
  CHECK(truth.substr(0, golden.size()) == golden);
  std::ifstream in(f.sim / "data_truth.csv");
  const CsvTable t = read_csv(in);
  CHECK(t.rows[0][0] == "0");
  CHECK(t.rows[0][1] == "1");
  CHECK(t.rows[25][1] == "26");
  CHECK(t.rows[26][0] == "1");
}

TEST_CASE("fit writes the expected number of draws and is reproducible") {
  auto& f = fixture();
  const fs::path a = f.dir / "fit_a", b = f.dir / "fit_b";
  REQUIRE(cli(f.fit_args + " --model tdlm --seed 3 --out " + a.string(), f.dir / "fa.log") == 0);
  REQUIRE(cli(f.fit_args + " --model tdlm --seed 3 --out " + b.string(), f.dir / "fb.log") == 0);
  CHECK(test::slurp(f.dir / "fa.log.out").find("draws 20 ") == 0);
  CHECK(read_draws((a / "draws.txt").string()).size() == 20);
  CHECK(test::slurp(a / "draws.txt") == test::slurp(b / "draws.txt"));
  REQUIRE(cli(f.fit_args + " --model tdlm --seed 4 --out " + b.string(), f.dir / "fb.log") == 0);
  CHECK(test::slurp(a / "draws.txt") != test::slurp(b / "draws.txt"));
  for (const char* file : {"diagnostics.txt", "fitted.csv", "config.txt"})
    CHECK(first_line(a / file).rfind("# hdlm-", 0) == 0);
  CHECK(test::slurp(a / "diagnostics.txt").find("sigma_q0.5 = ") != std::string::npos);
}

TEST_CASE("chains are merged in chain order") {
  auto& f = fixture();
  const fs::path a = f.dir / "chains";
  REQUIRE(cli(f.fit_args + " --model tdlm --seed 3 --chains 2 --out " + a.string(), f.dir / "ch.log") == 0);
  CHECK(read_draws((a / "draws.txt").string()).size() == 40);
}

TEST_CASE("missing schema file names the path") {
  auto& f = fixture();
  const std::string missing = (f.dir / "nope" / "schema.txt").string();
  const int rc = cli("fit --data " + (f.sim / "data.csv").string() + " --schema " + missing +
                          " --exposures x1..x26 --out " + (f.dir / "x").string(),
                      f.dir / "ms.log");
  CHECK(rc == 3);
  CHECK(test::slurp(f.dir / "ms.log").find(missing) != std::string::npos);
}

TEST_CASE("unknown configuration keys are rejected") {
  auto& f = fixture();
  test::spit(f.dir / "bad.cfg", "model = tdlm\ncolour = blue\n");
  CHECK(cli(f.fit_args + " --config " + (f.dir / "bad.cfg").string(), f.dir / "uk.log") == 2);
  CHECK(test::slurp(f.dir / "uk.log").find("colour") != std::string::npos);
  CHECK(cli(f.fit_args + " --set colour=blue", f.dir / "uk2.log") == 2);
}

TEST_CASE("flags win over the configuration file") {
  auto& f = fixture();
  test::spit(f.dir / "flags.cfg", "model = hdlm-nested\nchains = 2\n");
  const fs::path out = f.dir / "flags";
  REQUIRE(cli(f.fit_args + " --config " + (f.dir / "flags.cfg").string() + " --model tdlm --out " +
                   out.string(),
               f.dir / "fl.log") == 0);
  const auto d = read_draws((out / "draws.txt").string());
  CHECK(d.model == ModelKind::tdlm);
  CHECK(d.size() == 40);
}

TEST_CASE("summarize on an all-zero draw file flags no windows") {
  auto& f = fixture();
  PosteriorDraws d;
  d.model = ModelKind::tdlm;
  d.lags = 6;
  d.fixed_names = {"intercept"};
  d.config.trees = 1;
  d.columns.exposures = {"x1", "x2", "x3", "x4", "x5", "x6"};
  EnsembleState s;
  s.trees = {ModifierTree(LeafLag{DlmTree(6, 0.0), {}})};
  s.tau2 = {1.0};
  s.xi_tau = {1.0};
  d.states.assign(10, s);
  d.gamma.assign(10, Eigen::VectorXd::Zero(1));
  d.chain.assign(10, 0);
  const fs::path file = f.dir / "zero_draws.txt";
  write_draws(file.string(), d);
  const fs::path out = f.dir / "zero";
  REQUIRE(cli("summarize --draws " + file.string() + " --out " + out.string(), f.dir / "z.log") == 0);
  std::ifstream in(out / "curves.csv");
  const CsvTable t = read_csv(in);
  REQUIRE(t.rows.size() == 6);
  const auto w = static_cast<std::size_t>(t.column("window"));
  for (const auto& r : t.rows) CHECK(r[w] == "0");
  CHECK(first_line(out / "cumulative.csv") == "# hdlm-cumulative 1");
}

TEST_CASE("summarize, pip and predict on a nested fit") {
  auto& f = fixture();
  const fs::path fit_dir = f.dir / "nested";
  REQUIRE(cli(f.fit_args + " --model hdlm-nested --seed 5 --out " + fit_dir.string(), f.dir / "n.log") == 0);
  const std::string draws = (fit_dir / "draws.txt").string();

  const fs::path pip_dir = f.dir / "pip";
  REQUIRE(cli("pip --draws " + draws + " --out " + pip_dir.string(), f.dir / "p.log") == 0);
  CHECK(data_rows(pip_dir / "pip.csv") == 13);
  CHECK(data_rows(pip_dir / "interactions.csv") == 13 * 12 / 2);
  CHECK(first_line(pip_dir / "splits.csv") == "# hdlm-splits 1");

  const fs::path sum_dir = f.dir / "summary";
  REQUIRE(cli("summarize --draws " + draws + " --rows " + (f.sim / "data.csv").string() +
                   " --subgroup 'effect: z1 > 0 & z2 == 1' --subgroup 'none: z1 <= 0' --level 0.9 --out " +
                   sum_dir.string(),
               f.dir / "s.log") == 0);
  CHECK(data_rows(sum_dir / "curves.csv") == 120 * 26);
  CHECK(data_rows(sum_dir / "cumulative.csv") == 120);
  CHECK(data_rows(sum_dir / "subgroups.csv") == 2 * 26);
  CHECK(cli("summarize --draws " + draws + " --out " + sum_dir.string(), f.dir / "s2.log") == 2);

  const fs::path pred_dir = f.dir / "pred";
  REQUIRE(cli("predict --draws " + draws + " --data " + (f.sim / "data.csv").string() + " --out " +
                   pred_dir.string(),
               f.dir / "pr.log") == 0);
  std::ifstream pin(pred_dir / "predictions.csv"), fin(fit_dir / "fitted.csv");
  const CsvTable pred = read_csv(pin), fitted = read_csv(fin);
  REQUIRE(pred.rows.size() == 120);
  REQUIRE(fitted.rows.size() == 120);
  double worst = 0;
  for (std::size_t i = 0; i < 120; ++i) {
    const double a = std::stod(pred.rows[i][1]), b = std::stod(fitted.rows[i][1]);
    worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(b)));
  }
  CHECK(worst < 1e-8);

  // new data without the outcome column still predicts
  std::ifstream din(f.sim / "data.csv");
  CsvTable data = read_csv(din);
  std::ostringstream no_y;
  for (std::size_t c = 1; c < data.header.size(); ++c) no_y << (c > 1 ? "," : "") << data.header[c];
  no_y << '\n';
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t c = 1; c < data.header.size(); ++c) no_y << (c > 1 ? "," : "") << data.rows[i][c];
    no_y << '\n';
  }
  test::spit(f.dir / "new.csv", no_y.str());
  REQUIRE(cli("predict --draws " + draws + " --data " + (f.dir / "new.csv").string() + " --out " +
                   (f.dir / "pred2").string(),
               f.dir / "pr2.log") == 0);
  CHECK(data_rows(f.dir / "pred2" / "predictions.csv") == 5);
  CHECK(cli("predict --draws " + draws + " --data " + (f.dir / "missing.csv").string() + " --out " +
                 (f.dir / "pred3").string(),
             f.dir / "pr3.log") == 3);
}

TEST_CASE("study writes replicate and aggregate tables") {
  auto& f = fixture();
  const fs::path out = f.dir / "study";
  REQUIRE(cli("study --scenario 3 --n 80 --test-size 40 --replicates 2 --models tdlm,hdlm-nested --iterations 30"
               " --burn-in 10 --trees 2 --set lags=12 --set min_leaf=10 --seed 2 --out " + out.string(),
               f.dir / "st.log") == 0);
  CHECK(first_line(out / "replicates.csv") == "# hdlm study-replicates 1");
  CHECK(data_rows(out / "replicates.csv") == 4);
  CHECK(data_rows(out / "aggregate.csv") == 2);
  CHECK(first_line(out / "manifest.txt") == "# hdlm study-manifest 1");
}
