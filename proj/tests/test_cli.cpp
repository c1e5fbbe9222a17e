#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>

#include "fsmn/lm_data.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

const fs::path& work_root() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / ("fsmn-cli-test-" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Runs the tool from `cwd` with shell-quoted arguments.
Result run(const std::string& args, const fs::path& cwd = work_root()) {
  const fs::path err = work_root() / "stderr.txt";
  const std::string cmd = "cd '" + cwd.string() + "' && '" FSMN_CLI_PATH "' " + args + " 2>'" + err.string() + "'";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

const fs::path& data_dir() {
  static const fs::path dir = [] {
    fs::path d = work_root() / "data";
    auto r = run("synth-corpus --out '" + d.string() +
                 "' --train-sentences 400 --valid-sentences 60 --test-sentences 60 --topics 4 --words-per-topic 12"
                 " --generic-words 20 --function-words 6");
    EXPECT_EQ(r.code, 0) << r.err;
    return d;
  }();
  return dir;
}

std::string corpus_flags() {
  const auto d = data_dir().string();
  return "--train '" + d + "/train.txt' --valid '" + d + "/valid.txt' --test '" + d + "/test.txt'";
}

Result train(const std::string& out, const std::string& extra = "") {
  return run("train --arch '[1*16]-32(M)-32-V' --lookback 4 " + corpus_flags() + " --out '" +
             (work_root() / out).string() + "' --batch-size 16 --epochs 3 --seed 5 " + extra);
}

std::string last_line(const std::string& s) {
  auto t = s;
  while (!t.empty() && t.back() == '\n') t.pop_back();
  return t.substr(t.rfind('\n') == std::string::npos ? 0 : t.rfind('\n') + 1);
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<double> fields(const std::string& line) {
  std::vector<double> out;
  std::istringstream in(line);
  for (std::string f; std::getline(in, f, ',');) out.push_back(std::stod(f));
  return out;
}

}  // namespace

TEST(Cli, TrainSmokeRun) {
  auto r = train("smoke");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto dir = work_root() / "smoke";
  for (const char* f : {"history.csv", "vocab.txt", "final.ckpt", "epoch-001.ckpt", "epoch-003.ckpt"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  auto hist = lines(slurp(dir / "history.csv"));
  ASSERT_EQ(hist.size(), 4u);
  EXPECT_EQ(hist[0], "epoch,lr,train_loss,valid_ppl");
  EXPECT_EQ(last_line(r.out).rfind("test_ppl ", 0), 0u) << r.out;
}

TEST(Cli, SameSeedGivesIdenticalArtifacts) {
  auto a = train("det-a", "--threads 1");
  auto b = train("det-b", "--threads 1");
  auto c = train("det-c", "--threads 3");
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  ASSERT_EQ(c.code, 0) << c.err;
  for (const char* f : {"history.csv", "epoch-002.ckpt", "final.ckpt"}) {
    EXPECT_EQ(slurp(work_root() / "det-a" / f), slurp(work_root() / "det-b" / f)) << f;
    EXPECT_EQ(slurp(work_root() / "det-a" / f), slurp(work_root() / "det-c" / f)) << f;
  }
}

TEST(Cli, BadArchitectureNamesSegment) {
  auto r = run("train --arch '[1*16]-32(Q)-32-V' " + corpus_flags() + " --out '" + (work_root() / "bad").string() + "'");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("'32(Q)'"), std::string::npos) << r.err;
}

TEST(Cli, MissingInputsFail) {
  auto r = run("train --arch '[1*16]-32-V' --train /nonexistent --valid /nonexistent --out '" +
               (work_root() / "missing").string() + "'");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("/nonexistent"), std::string::npos);
  auto no_arch = run("train " + corpus_flags() + " --out x");
  EXPECT_NE(no_arch.code, 0);
  EXPECT_NE(no_arch.err.find("--arch"), std::string::npos);
}

TEST(Cli, EvalReproducesTrainTestPerplexity) {
  auto t = train("evalrun", "--epochs 4");
  ASSERT_EQ(t.code, 0) << t.err;
  const auto ck = (work_root() / "evalrun" / "final.ckpt").string();
  auto test = run("eval --checkpoint '" + ck + "' --test '" + (data_dir() / "test.txt").string() + "'");
  ASSERT_EQ(test.code, 0) << test.err;
  EXPECT_EQ("test_ppl " + last_line(test.out), last_line(t.out));
  auto on_train = run("eval --checkpoint '" + ck + "' --test '" + (data_dir() / "train.txt").string() + "'");
  ASSERT_EQ(on_train.code, 0) << on_train.err;
  std::ifstream vocab(work_root() / "evalrun" / "vocab.txt");
  const auto vocab_size = std::count(std::istreambuf_iterator<char>(vocab), {}, '\n');
  EXPECT_LT(std::stod(on_train.out), double(vocab_size));  // better than a uniform guess
  const auto& s = test.out;
  EXPECT_EQ(s.size() - s.find('.'), 4u) << s;  // two decimals and a newline
}

TEST(Cli, EvalRejectsCorruptCheckpointAndVocabMismatch) {
  auto t = train("corrupt", "--epochs 1");
  ASSERT_EQ(t.code, 0) << t.err;
  const auto ck = work_root() / "corrupt" / "final.ckpt";
  auto bytes = slurp(ck);
  bytes[bytes.size() - 30] ^= 0x55;
  const auto bad = work_root() / "corrupt" / "bad.ckpt";
  std::ofstream(bad, std::ios::binary) << bytes;
  auto r = run("eval --checkpoint '" + bad.string() + "' --test '" + (data_dir() / "test.txt").string() + "'");
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(r.out.empty());
  EXPECT_NE(r.err.find("checksum"), std::string::npos) << r.err;

  const auto vocab = work_root() / "corrupt" / "other-vocab.txt";
  std::ofstream(vocab) << "a\nb\n<unk>\n";
  auto m = run("eval --checkpoint '" + ck.string() + "' --vocab '" + vocab.string() + "' --test '" +
               (data_dir() / "test.txt").string() + "'");
  EXPECT_NE(m.code, 0);
  EXPECT_NE(m.err.find("does not match"), std::string::npos) << m.err;
}

TEST(Cli, GradcheckExitCodes) {
  auto ok = run("gradcheck");
  EXPECT_EQ(ok.code, 0) << ok.out << ok.err;
  for (const char* v : {"sfsmn-uni", "sfsmn-bi", "vfsmn-uni", "vfsmn-bi", "attention", "rnn"})
    EXPECT_NE(ok.out.find(std::string(v) + ","), std::string::npos) << v;
  auto fault = run("gradcheck --inject-fault");
  EXPECT_NE(fault.code, 0);
  EXPECT_NE(fault.out.find("FAIL"), std::string::npos);
  EXPECT_NE(run("gradcheck --threshold 1e-13").code, 0);
  EXPECT_EQ(run("gradcheck --threshold 1e-3 --inject-fault").code, 0);
}

TEST(Cli, DumpFilters) {
  auto init = run("train --arch '[1*4]-6(S2,1)-6-V' --tap-init 0 --epochs 0 " + corpus_flags() + " --out '" +
                  (work_root() / "scalar").string() + "'");
  ASSERT_EQ(init.code, 0) << init.err;
  auto s = run("dump-filters --checkpoint '" + (work_root() / "scalar" / "final.ckpt").string() + "'");
  ASSERT_EQ(s.code, 0) << s.err;
  auto rows = lines(s.out);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], "offset,coef,mean");
  EXPECT_EQ(fields(rows[1]), (std::vector<double>{-1, 0, 0}));
  EXPECT_EQ(fields(rows[2]), (std::vector<double>{0, 1, 1}));
  EXPECT_EQ(fields(rows[4]), (std::vector<double>{2, 0, 0}));

  auto t = train("vector", "--epochs 1");
  ASSERT_EQ(t.code, 0) << t.err;
  auto v = run("dump-filters --checkpoint '" + (work_root() / "vector" / "final.ckpt").string() + "' --out '" +
               (work_root() / "vector").string() + "'");
  ASSERT_EQ(v.code, 0) << v.err;
  auto vrows = lines(slurp(work_root() / "vector" / "filters-layer2.csv"));
  ASSERT_EQ(vrows.size(), 6u);  // header + offsets 0..4
  for (std::size_t i = 1; i < vrows.size(); ++i) {
    auto f = fields(vrows[i]);
    ASSERT_EQ(f.size(), 34u);
    double sum = 0;
    for (std::size_t d = 1; d + 1 < f.size(); ++d) sum += f[d];
    EXPECT_NEAR(f.back(), sum / 32, 1e-12);
  }
  auto none = run("dump-filters --layer 1 --checkpoint '" + (work_root() / "vector" / "final.ckpt").string() + "'");
  EXPECT_NE(none.code, 0);
  EXPECT_NE(none.err.find("no memory"), std::string::npos) << none.err;
}

TEST(Cli, BenchTable) {
  auto r = run("bench --sizes 16,32 --hidden 16 --dim 8 --order 5 --sequences 4 --repeats 1");
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 11u);
  EXPECT_EQ(rows[0], "variant,T,seconds,loss,params");
  std::map<std::string, std::string> loss;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    auto name = rows[i].substr(0, rows[i].find(','));
    auto rest = rows[i].substr(name.size() + 1);
    auto T = rest.substr(0, rest.find(','));
    auto f = fields(rest);
    loss[name + "@" + T] = std::to_string(f[2]);
  }
  for (const char* T : {"16", "32"}) {
    EXPECT_EQ(loss[std::string("encode-naive@") + T], loss[std::string("encode-banded@") + T]);
    EXPECT_EQ(loss[std::string("encode-naive@") + T], loss[std::string("encode-walk@") + T]);
    EXPECT_TRUE(loss.count(std::string("epoch-rnn@") + T));
  }
}

TEST(Cli, ConfigFileAndOverrides) {
  const auto cfg = work_root() / "run.cfg";
  std::ofstream(cfg) << "# toy settings\narch = [1*8]-16(M)-16-V\nlookback = 3\nepochs = 2  # short\n"
                        "batch_size = 32\nlr = 0.1\nseed = 9\n";
  auto out = (work_root() / "cfg").string();
  auto r = run("train --config '" + cfg.string() + "' --epochs 1 --lr 0.2 " + corpus_flags() + " --out '" + out + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  auto hist = lines(slurp(fs::path(out) / "history.csv"));
  ASSERT_EQ(hist.size(), 2u);  // flag wins over the file
  EXPECT_EQ(hist[1].substr(0, 6), "1,0.2,");
  std::ofstream(work_root() / "bad.cfg") << "nonsense = 1\n";
  auto bad = run("train --config '" + (work_root() / "bad.cfg").string() + "' " + corpus_flags() + " --out x");
  EXPECT_NE(bad.code, 0);
  EXPECT_NE(bad.err.find("nonsense"), std::string::npos);
}

TEST(Cli, WritesOnlyIntoOutputDirectory) {
  const auto cwd = work_root() / "clean-cwd";
  fs::create_directories(cwd);
  auto r = run("train --arch '[1*8]-16(M)-16-V' --lookback 2 --epochs 1 " + corpus_flags() + " --out '" +
                   (work_root() / "elsewhere").string() + "'",
               cwd);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::is_empty(cwd));
}
