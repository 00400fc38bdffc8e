#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>
#include <thread>

#include "slip/decomposer.hpp"
#include "slip/model.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(SLIPWIRE_BIN) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    char tmpl[] = "/tmp/slipwire-cli-XXXXXX";
    dir_ = ::mkdtemp(tmpl);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenModelIsDeterministic) {
  ASSERT_EQ(run("--seed 7 gen-model --dims 4,8,2 --out " + path("a.json")).code, 0);
  ASSERT_EQ(run("gen-model --dims 4,8,2 --seed 7 --out " + path("b.json")).code, 0);
  EXPECT_EQ(slurp(path("a.json")), slurp(path("b.json")));
  EXPECT_EQ(run("gen-model --dims 4 --out " + path("c.json")).code, 2);
  EXPECT_EQ(run("gen-model --out").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  ASSERT_EQ(run("gen-model --out " + path("d.json")).code, 0);
  EXPECT_EQ(run("decompose --model " + path("d.json") + " --out-charlie " + path("c1") +
                " --out-david " + path("d1")).code,
            0);
}

TEST_F(Cli, DecomposeReportsAndValidates) {
  ASSERT_EQ(run("gen-model --dims 6,5,3 --out " + path("m.json")).code, 0);
  ASSERT_EQ(run("decompose --model " + path("m.json") + " --ranks 0 --out-charlie " +
                path("c.json") + " --out-david " + path("d.json")).code,
            0);
  const slip::MlpModel m = slip::load_model(path("m.json"));
  const slip::QuantizedModel q(m, slip::FixedPointCodec{});
  const slip::DavidParts parts = slip::load_david_parts(path("d.json"));
  for (std::size_t i = 0; i < m.layer_count(); ++i) EXPECT_EQ(parts.weights[i], q.weights(i));

  EXPECT_EQ(run("decompose --model " + path("m.json") + " --ranks 9 --out-charlie " +
                path("c.json") + " --out-david " + path("d.json")).code,
            2);
  const Result missing = run("decompose --model " + path("nope.json") + " --out-charlie " +
                             path("c.json") + " --out-david " + path("d.json"));
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.out.find("nope.json"), std::string::npos);

  ASSERT_EQ(run("gen-model --dims 256,256,256,256,256 --out " + path("big.json")).code, 0);
  const Result big = run("--check-count 2 decompose --model " + path("big.json") +
                         " --ranks 4 --out-charlie " + path("bc.json") + " --out-david " +
                         path("bd.json"));
  ASSERT_EQ(big.code, 0) << big.out;
  std::smatch match;
  ASSERT_TRUE(std::regex_search(big.out, match, std::regex("cost ratio[^:]*: ([0-9.]+)")));
  EXPECT_LT(std::stod(match[1]), 0.1);
}

TEST_F(Cli, RunMatchesInferAndAbortsOnCheat) {
  ASSERT_EQ(run("gen-model --dims 5,7,3 --activations relu,identity --seed 3 --out " +
                path("m.json")).code,
            0);
  ASSERT_EQ(run("decompose --model " + path("m.json") + " --ranks 2 --out-charlie " +
                path("c.json") + " --out-david " + path("d.json")).code,
            0);
  const std::string input = " --input 0.5,-0.25,0.125,0.9,-0.7";
  const Result ref = run("infer --model " + path("m.json") + input);
  ASSERT_EQ(ref.code, 0);
  const std::string files = " --charlie " + path("c.json") + " --david " + path("d.json");
  for (const char* mode : {"insecure", "honest", "malicious"}) {
    const Result r = run(std::string("run --mode ") + mode + files + input);
    EXPECT_EQ(r.code, 0) << mode << r.out;
    EXPECT_EQ(r.out, ref.out) << mode;
  }
  const Result cheat = run("run --mode malicious --cheat flip:1 --transcript " +
                           path("t.json") + files + input);
  EXPECT_EQ(cheat.code, 3);
  EXPECT_NE(cheat.out.find("ABORT"), std::string::npos);
  EXPECT_NE(slurp(path("t.json")).find("\"Abort\""), std::string::npos);

  EXPECT_EQ(run("run --mode sideways" + files + input).code, 2);
  EXPECT_EQ(run("run --mode honest --charlie " + path("c.json") + input).code, 2);
  EXPECT_EQ(run("--check-count 0 run --mode malicious" + files + input).code, 2);
  EXPECT_EQ(run("run --transport tcp --connect 127.0.0.1:1 --charlie " + path("c.json") + input)
                .code,
            4);
}

TEST_F(Cli, RunOverTcp) {
  ASSERT_EQ(run("gen-model --dims 4,6,2 --out " + path("m.json")).code, 0);
  ASSERT_EQ(run("decompose --model " + path("m.json") + " --ranks 1 --out-charlie " +
                path("c.json") + " --out-david " + path("d.json")).code,
            0);
  const std::string log = path("server.log");
  const std::string serve = std::string(SLIPWIRE_BIN) + " serve-david --david " +
                            path("d.json") + " --listen 127.0.0.1:0 --sessions 1 > " +
                            log + " 2>&1 &";
  ASSERT_EQ(std::system(serve.c_str()), 0);
  std::string port;
  for (int i = 0; i < 100 && port.empty(); ++i) {
    std::smatch m;
    const std::string text = slurp(log);
    if (std::regex_search(text, m, std::regex("listening on [^:]+:([0-9]+)"))) port = m[1];
    else std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  ASSERT_FALSE(port.empty());
  const std::string input = " --input 0.1,0.2,0.3,0.4";
  const Result local = run("run --mode malicious --charlie " + path("c.json") + " --david " +
                           path("d.json") + input);
  const Result remote = run("run --mode malicious --transport tcp --connect 127.0.0.1:" + port +
                            " --charlie " + path("c.json") + input);
  EXPECT_EQ(remote.code, 0) << remote.out;
  EXPECT_EQ(remote.out, local.out);
}

TEST_F(Cli, AttackCommands) {
  ASSERT_EQ(run("gen-model --dims 5,5,4 --activations identity --out " + path("m.json")).code, 0);
  const std::string base = "--frac-bits 0 attack recover --model " + path("m.json");
  const Result exact = run(base + " --mode insecure");
  EXPECT_EQ(exact.code, 0) << exact.out;
  EXPECT_NE(exact.out.find("EXACT MATCH"), std::string::npos);
  const Result none = run(base + " --mode honest");
  EXPECT_NE(none.out.find("NO MATCH"), std::string::npos);
  EXPECT_EQ(run(base + " --mode insecure --queries 3").code, 1);

  ASSERT_EQ(run("gen-model --dims 4,4,4 --activations relu,identity --out " + path("s.json")).code,
            0);
  const Result snd = run("--prime 101 --wrap --check-count 1 attack soundness --model " +
                         path("s.json") + " --ranks 1 --trials 20000");
  ASSERT_EQ(snd.code, 0) << snd.out;
  EXPECT_NE(snd.out.find("0.0099"), std::string::npos) << snd.out;
  EXPECT_EQ(run("--prime 101 --wrap attack soundness --model " + path("s.json") +
                " --trials 10").code,
            2);
}

TEST_F(Cli, BenchAndViews) {
  const Result bench = run("--check-count 2 bench --repeats 2");
  ASSERT_EQ(bench.code, 0) << bench.out;
  EXPECT_NE(bench.out.find("PASS"), std::string::npos);
  const Result j = run("--json --check-count 0 bench --dims 8,8 --ranks 0 --repeats 1");
  EXPECT_NE(j.out.find("\"analytic_ratio\": 0.375"), std::string::npos) << j.out;

  ASSERT_EQ(run("gen-model --dims 4,4,4,4 --out " + path("m.json")).code, 0);
  const Result views = run("--prime 101 --wrap stats views --model " + path("m.json") +
                           " --ranks 1 --sessions 5000");
  ASSERT_EQ(views.code, 0) << views.out;
  EXPECT_NE(views.out.find("within band"), std::string::npos);
  EXPECT_EQ(run("stats views --model " + path("m.json")).code, 2);
}
