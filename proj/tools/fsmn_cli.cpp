// fsmn: train, evaluate and inspect FSMN language models.
//
//   fsmn train        --arch A --train F --valid F [--test F] --out DIR
//   fsmn eval         --checkpoint F --test F
//   fsmn gradcheck    [--threshold 1e-6]
//   fsmn dump-filters --checkpoint F [--layer I] [--out DIR]
//   fsmn bench        [--sizes 32,128,512]
//   fsmn synth-corpus --out DIR
//
// Every command accepts --config FILE with `key = value` lines; keys are long
// flag names without the dashes. Flags given on the command line win.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fsmn/fsmn.hpp"

namespace fs = std::filesystem;
using namespace fsmn;

namespace {

struct Common {
  std::string config;
  std::string precision;
  unsigned threads = 1;
};

std::map<std::string, std::string> read_config(const std::string& path) {
  std::map<std::string, std::string> kv;
  std::istringstream in(read_file(path));
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto body = detail::trim(line);
    if (body.empty()) continue;
    auto eq = body.find('=');
    if (eq == std::string_view::npos)
      throw FormatError(path + ":" + std::to_string(n) + ": expected 'key = value'");
    std::string key(detail::trim(body.substr(0, eq)));
    std::string value(detail::trim(body.substr(eq + 1)));
    if (key.empty()) throw FormatError(path + ":" + std::to_string(n) + ": missing key");
    std::replace(key.begin(), key.end(), '_', '-');
    kv[key] = value;
  }
  return kv;
}

/// Fills options the command line left unset from the config file.
void apply_config(CLI::App* cmd, const Common& c) {
  if (c.config.empty()) return;
  for (const auto& [key, value] : read_config(c.config)) {
    if (key == "config") throw FormatError("config files cannot include other config files");
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (!opt) throw FormatError("unknown config key '" + key + "' for command " + cmd->get_name());
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

void add_common(CLI::App* cmd, Common& c, const std::string& default_precision) {
  c.precision = default_precision;
  cmd->add_option("--config", c.config, "key = value file; explicit flags override it");
  cmd->add_option("--precision", c.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  cmd->add_option("--threads", c.threads, "worker threads (results do not depend on it)")->capture_default_str();
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw InputError(flag + " is required");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw InputError("cannot create output directory '" + dir + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

template <typename F>
auto with_precision(const std::string& p, F&& f) {
  if (p == "f32") return f(float{});
  return f(double{});
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  Common common;
  std::string arch, train, valid, test, out, vocab_file;
  std::size_t vocab_size = 10000;
  bool eos = false;
  std::string memory_kind = "vector";
  std::size_t lookback = 20, lookahead = 0, attention_dim = 16;
  std::string activation = "relu", attention_activation = "relu";
  double tap_init = 0.0;
  TrainConfig cfg;
  std::string reference = "best";
};

template <typename T>
int run_train(const TrainArgs& a) {
  TextOptions text{a.eos};
  const std::string train_text = read_file(a.train), valid_text = read_file(a.valid);
  const std::string test_text = a.test.empty() ? std::string() : read_file(a.test);
  Vocab vocab = a.vocab_file.empty() ? build_vocab(train_text, a.vocab_size, text) : [&] {
    std::istringstream in(read_file(a.vocab_file));
    return Vocab::load(in);
  }();

  ArchDefaults d;
  d.vocab = vocab.size();
  d.memory_kind = parse_memory_kind(a.memory_kind);
  d.lookback = a.lookback;
  d.lookahead = a.lookahead;
  d.attention_dim = a.attention_dim;
  d.hidden_activation = parse_activation(a.activation);
  d.attention_activation = parse_activation(a.attention_activation);
  const ModelSpec spec = parse_architecture(a.arch, d);
  if (!spec.token_input()) throw InputError("train needs a token-input architecture such as [2*200]-600(M)-600-V");

  const Corpus train = encode_corpus(train_text, vocab, text, Split::Train);
  const Corpus valid = encode_corpus(valid_text, vocab, text, Split::Valid);

  ensure_dir(a.out);
  const fs::path out(a.out);
  {
    std::ostringstream v;
    vocab.save(v);
    write_text(out / "vocab.txt", v.str());
  }

  Checkpoint<T> ck;
  ck.arch = format_architecture(spec);
  ck.defaults = d;
  ck.text = text;
  ck.vocab = vocab;
  ck.spec = spec;

  std::vector<HistoryRecord> history;
  auto write_history = [&](const std::vector<HistoryRecord>& h) {
    std::ostringstream s;
    write_history_csv(s, h);
    write_text(out / "history.csv", s.str());
  };
  auto on_epoch = [&](const HistoryRecord& rec, const ModelParams<T>& p, const TrainState<T>& st) {
    history.push_back(rec);
    std::printf("epoch %zu lr %.6g train_loss %.6f valid_ppl %.2f\n", rec.epoch, rec.lr, rec.train_loss, rec.valid_ppl);
    std::fflush(stdout);
    ck.params = p;
    ck.state = st;
    char name[32];
    std::snprintf(name, sizeof name, "epoch-%03zu.ckpt", rec.epoch);
    save_checkpoint((out / name).string(), ck);
    write_history(history);
  };

  auto params = init_params<T>(spec, InitOptions{a.cfg.seed, a.tap_init});
  auto res = train_loop<T>(spec, std::move(params), train, valid, a.cfg, on_epoch);
  write_history(res.history);
  ck.params = res.params;
  ck.state = res.state;
  save_checkpoint((out / "final.ckpt").string(), ck);
  if (res.diverged) {
    std::fprintf(stderr, "error: training diverged in epoch %zu; final.ckpt holds the last good parameters\n",
                 res.history.back().epoch);
    return 1;
  }
  if (!test_text.empty()) {
    const Corpus test = encode_corpus(test_text, vocab, text, Split::Test);
    std::printf("test_ppl %.2f\n", perplexity(spec, res.params, test, a.cfg.batch_size, a.cfg.memory_path));
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  Common common;
  std::string checkpoint, test, vocab_file;
  std::size_t batch_size = 200;
};

template <typename T>
int run_eval(const EvalArgs& a, const std::string& bytes) {
  const auto ck = deserialize_checkpoint<T>(bytes);
  if (!a.vocab_file.empty()) {
    std::istringstream in(read_file(a.vocab_file));
    if (!(Vocab::load(in) == ck.vocab))
      throw InputError("vocabulary '" + a.vocab_file + "' does not match the checkpoint vocabulary");
  }
  const Corpus test = encode_corpus(read_file(a.test), ck.vocab, ck.text, Split::Test);
  std::printf("%.2f\n", perplexity(ck.spec, ck.params, test, a.batch_size));
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradCheckArgs {
  Common common;
  double threshold = 1e-6;
  double epsilon = 1e-5;
  double floor = 1e-4;
  std::string activation = "relu";
  std::string variant;
  std::uint64_t seed = 11;
  bool inject_fault = false;
};

int run_gradcheck(const GradCheckArgs& a) {
  if (a.common.precision != "f64") throw InputError("gradcheck runs in f64 only");
  ArchDefaults d;
  d.hidden_activation = parse_activation(a.activation);
  bool ok = true, any = false;
  std::printf("variant,tensor,checked,max_rel_err,max_abs_err,status\n");
  for (const auto& z : variant_zoo()) {
    if (!a.variant.empty() && z.name != a.variant) continue;
    any = true;
    const auto spec = parse_architecture(z.arch, d);
    const auto params = random_params<double>(spec, a.seed);
    const auto batch = random_feature_batch<double>(4, {5, 3}, 5, a.seed + 1);
    GradCheckOptions o;
    o.epsilon = a.epsilon;
    o.floor = a.floor;
    o.inject_fault = a.inject_fault;
    const auto rep = grad_check(spec, params, batch, o);
    for (const auto& t : rep.tensors) {
      const bool pass = t.max_rel_err <= a.threshold;
      ok = ok && pass;
      std::printf("%s,%s,%zu,%.3e,%.3e,%s\n", z.name.c_str(), t.name.c_str(), t.checked, t.max_rel_err,
                  t.max_abs_err, pass ? "ok" : "FAIL");
    }
  }
  if (!any) throw InputError("unknown variant '" + a.variant + "'");
  if (!ok) std::fprintf(stderr, "gradcheck failed: tensors above threshold %.3g are marked FAIL\n", a.threshold);
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// dump-filters

struct DumpArgs {
  Common common;
  std::string checkpoint, out;
  int layer = -1;
};

template <typename T>
int run_dump(const DumpArgs& a, const std::string& bytes) {
  const auto ck = deserialize_checkpoint<T>(bytes);
  std::size_t li = 0;
  if (a.layer < 0) {
    while (li < ck.spec.layers.size() && !layer_memory(ck.spec.layers[li])) ++li;
    if (li == ck.spec.layers.size()) throw InputError("the model has no memory block");
  } else {
    li = std::size_t(a.layer);
    if (li >= ck.spec.layers.size()) throw InputError("layer " + std::to_string(li) + " does not exist");
  }
  const MemoryConfig* m = layer_memory(ck.spec.layers[li]);
  if (!m) throw InputError("layer " + std::to_string(li) + " has no memory block");
  if (m->kind == MemoryKind::Attention)
    throw InputError("layer " + std::to_string(li) + " has an attention memory block, which has no fixed filter taps");
  const auto& mp = ck.params.layers[li].memory;
  const std::size_t width = mp.lookback.cols();

  std::ostringstream csv;
  csv << "offset";
  if (m->kind == MemoryKind::Scalar) csv << ",coef";
  else
    for (std::size_t d = 0; d < width; ++d) csv << ",d" << d;
  csv << ",mean\n";
  char buf[64];
  auto row = [&](long offset, const Matrix<T>& taps, std::size_t r) {
    csv << offset;
    double sum = 0;
    for (std::size_t d = 0; d < width; ++d) {
      std::snprintf(buf, sizeof buf, ",%.17g", double(taps(r, d)));
      csv << buf;
      sum += double(taps(r, d));
    }
    std::snprintf(buf, sizeof buf, ",%.17g\n", sum / double(width));
    csv << buf;
  };
  // Negative offsets are lookahead taps c_j, non-negative ones lookback taps a_i.
  for (std::size_t j = m->lookahead; j >= 1; --j) row(-long(j), mp.lookahead, j - 1);
  for (std::size_t i = 0; i <= m->lookback; ++i) row(long(i), mp.lookback, i);

  if (a.out.empty()) {
    std::cout << csv.str();
  } else {
    ensure_dir(a.out);
    write_text(fs::path(a.out) / ("filters-layer" + std::to_string(li) + ".csv"), csv.str());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  Common common;
  std::string sizes = "32,128,512";
  std::size_t dim = 32, hidden = 64, classes = 32, order = 20, sequences = 16, batch = 4, repeats = 3;
  std::uint64_t seed = 5;
};

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto v = detail::parse_count(detail::trim(item));
    if (!v || *v == 0) throw InputError("bad sequence length '" + item + "' in --sizes");
    out.push_back(*v);
  }
  if (out.empty()) throw InputError("--sizes is empty");
  return out;
}

template <typename T>
int run_bench(const BenchArgs& a) {
  using clock = std::chrono::steady_clock;
  const std::string h = std::to_string(a.hidden), dim = std::to_string(a.dim), c = std::to_string(a.classes);
  const auto fsmn_spec = parse_architecture(dim + "-" + h + "(V" + std::to_string(a.order) + ",0)-" + h + "-" + c);
  const auto rnn_spec = parse_architecture(dim + "-" + h + "(R)-" + h + "-" + c);
  const auto fsmn_params = init_params<T>(fsmn_spec, {a.seed, 0.05});
  const auto rnn_params = init_params<T>(rnn_spec, {a.seed, 0.0});
  const std::size_t repeats = std::max<std::size_t>(1, a.repeats);

  std::printf("variant,T,seconds,loss,params\n");
  for (std::size_t T_len : parse_sizes(a.sizes)) {
    std::vector<FeatureBatch<T>> batches;
    for (std::size_t s = 0; s < a.sequences; s += a.batch) {
      std::vector<std::size_t> lengths(std::min(a.batch, a.sequences - s), T_len);
      batches.push_back(random_feature_batch<T>(a.dim, lengths, a.classes, a.seed * 7919 + T_len * 31 + s));
    }

    const std::pair<const char*, MemoryPath> paths[] = {
        {"encode-naive", MemoryPath::Reference}, {"encode-banded", MemoryPath::Dense}, {"encode-walk", MemoryPath::Walk}};
    for (const auto& [name, path] : paths) {
      double loss = 0, secs = 0;
      for (std::size_t r = 0; r < repeats; ++r) {
        loss = 0;
        const auto t0 = clock::now();
        for (const auto& b : batches) {
          auto fwd = forward(fsmn_spec, fsmn_params, b, ForwardOptions{path});
          loss += double(softmax_cross_entropy(fwd.logits, std::span<const std::uint32_t>(b.targets)).loss);
        }
        secs += std::chrono::duration<double>(clock::now() - t0).count();
      }
      std::printf("%s,%zu,%.6f,%.10g,%zu\n", name, T_len, secs / double(repeats), loss / double(batches.size()),
                  fsmn_params.parameter_count(fsmn_spec));
    }

    auto epoch = [&](const ModelSpec& spec, ModelParams<T> p, const char* name) {
      TrainConfig cfg;
      cfg.initial_lr = 0.05;
      cfg.clip_norm = 5.0;
      TrainState<T> st;
      st.schedule = ScheduleState::start(cfg);
      double loss = 0;
      const auto t0 = clock::now();
      for (const auto& b : batches) {
        auto bg = batch_gradient(spec, p, b, MemoryPath::Walk);
        loss += double(bg.loss);
        sgd_step(spec, p, bg.grads, st, cfg);
      }
      const double secs = std::chrono::duration<double>(clock::now() - t0).count();
      std::printf("%s,%zu,%.6f,%.10g,%zu\n", name, T_len, secs, loss / double(batches.size()),
                  p.parameter_count(spec));
    };
    epoch(fsmn_spec, fsmn_params, "epoch-fsmn");
    epoch(rnn_spec, rnn_params, "epoch-rnn");
    std::fflush(stdout);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// synth-corpus

struct SynthArgs {
  Common common;
  std::string out;
  SyntheticCorpusOptions opt;
  std::size_t train = 7000, valid = 700, test = 700;
};

int run_synth(const SynthArgs& a) {
  require(a.out, "--out");
  if (a.opt.topics == 0 || a.opt.words_per_topic == 0 || a.opt.generic_words == 0 || a.opt.function_words == 0)
    throw InputError("word-list sizes must be positive");
  if (a.opt.min_length == 0 || a.opt.max_length < a.opt.min_length)
    throw InputError("need 1 <= min-length <= max-length");
  const auto text = generate_topic_corpus(a.opt, a.train, a.valid, a.test);
  ensure_dir(a.out);
  const fs::path out(a.out);
  write_text(out / "train.txt", text.train);
  write_text(out / "valid.txt", text.valid);
  write_text(out / "test.txt", text.test);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feedforward sequential memory network toolkit"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a language model");
  add_common(train, ta.common, "f32");
  train->add_option("--arch", ta.arch, "architecture, e.g. [2*200]-400(M)-400-V (required)");
  train->add_option("--train", ta.train, "training text, one sentence per line (required)");
  train->add_option("--valid", ta.valid, "validation text (required)");
  train->add_option("--test", ta.test, "test text; its perplexity is printed at the end");
  train->add_option("--out", ta.out, "output directory (required)");
  train->add_option("--vocab", ta.vocab_file, "use this vocabulary file instead of building one");
  train->add_option("--vocab-size", ta.vocab_size, "vocabulary size including <unk>")->capture_default_str();
  train->add_flag("--eos", ta.eos, "append </s> to every sentence");
  train->add_option("--memory-kind", ta.memory_kind, "kind used by (M) marks: scalar, vector or attention")
      ->capture_default_str();
  train->add_option("--lookback", ta.lookback, "lookback order N1 for (M) marks")->capture_default_str();
  train->add_option("--lookahead", ta.lookahead, "lookahead order N2 for (M) marks")->capture_default_str();
  train->add_option("--attention-dim", ta.attention_dim, "attention width for (M) marks")->capture_default_str();
  train->add_option("--activation", ta.activation, "hidden activation")->capture_default_str();
  train->add_option("--attention-activation", ta.attention_activation, "attention activation")->capture_default_str();
  train->add_option("--tap-init", ta.tap_init, "uniform perturbation of the identity filter")->capture_default_str();
  train->add_option("--lr", ta.cfg.initial_lr, "initial learning rate")->capture_default_str();
  train->add_option("--momentum", ta.cfg.momentum, "momentum")->capture_default_str();
  train->add_option("--weight-decay", ta.cfg.weight_decay, "L2 weight decay on weights and embeddings")
      ->capture_default_str();
  train->add_flag("--decay-all", ta.cfg.decay_all, "also decay biases and memory taps");
  train->add_option("--clip-norm", ta.cfg.clip_norm, "global gradient norm limit, 0 = off")->capture_default_str();
  train->add_option("--batch-size", ta.cfg.batch_size, "sentences per mini-batch")->capture_default_str();
  train->add_option("--epochs", ta.cfg.max_epochs, "maximum epochs")->capture_default_str();
  train->add_option("--plateau-threshold", ta.cfg.plateau_threshold, "minimum validation PPL gain per epoch")
      ->capture_default_str();
  train->add_option("--halving-epochs", ta.cfg.halving_epochs, "epochs trained while halving the rate")
      ->capture_default_str();
  train->add_option("--plateau-reference", ta.reference, "compare against the best or the previous epoch")
      ->check(CLI::IsMember({"best", "previous"}))
      ->capture_default_str();
  train->add_option("--seed", ta.cfg.seed, "random seed")->capture_default_str();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "perplexity of a checkpoint on a text");
  add_common(eval, ea.common, "");
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint file (required)");
  eval->add_option("--test", ea.test, "text to score (required)");
  eval->add_option("--vocab", ea.vocab_file, "vocabulary the text was prepared with; must match the checkpoint");
  eval->add_option("--batch-size", ea.batch_size, "sentences per batch")->capture_default_str();

  GradCheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every layer variant");
  add_common(gc, ga.common, "f64");
  gc->add_option("--threshold", ga.threshold, "maximum relative error")->capture_default_str();
  gc->add_option("--epsilon", ga.epsilon, "central-difference step")->capture_default_str();
  gc->add_option("--floor", ga.floor, "denominator floor of the relative error")->capture_default_str();
  gc->add_option("--activation", ga.activation, "hidden activation")->capture_default_str();
  gc->add_option("--variant", ga.variant, "check one variant only");
  gc->add_option("--seed", ga.seed, "random seed")->capture_default_str();
  gc->add_flag("--inject-fault", ga.inject_fault, "perturb memory gradients so the check must fail");

  DumpArgs da;
  auto* dump = app.add_subcommand("dump-filters", "memory filter taps as CSV");
  add_common(dump, da.common, "");
  dump->add_option("--checkpoint", da.checkpoint, "checkpoint file (required)");
  dump->add_option("--layer", da.layer, "layer index; default: first layer with memory");
  dump->add_option("--out", da.out, "write filters-layer<I>.csv here instead of stdout");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "encoding and epoch timings as CSV");
  add_common(bench, ba.common, "f32");
  bench->add_option("--sizes", ba.sizes, "sequence lengths")->capture_default_str();
  bench->add_option("--dim", ba.dim, "input features")->capture_default_str();
  bench->add_option("--hidden", ba.hidden, "hidden units")->capture_default_str();
  bench->add_option("--classes", ba.classes, "output classes")->capture_default_str();
  bench->add_option("--order", ba.order, "lookback order of the memory block")->capture_default_str();
  bench->add_option("--sequences", ba.sequences, "sequences per epoch")->capture_default_str();
  bench->add_option("--batch-size", ba.batch, "sequences per batch")->capture_default_str();
  bench->add_option("--repeats", ba.repeats, "timing repeats of the encoding rows")->capture_default_str();
  bench->add_option("--seed", ba.seed, "random seed")->capture_default_str();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-corpus", "write a synthetic topic corpus");
  add_common(synth, sa.common, "f64");
  synth->add_option("--out", sa.out, "output directory (required)");
  synth->add_option("--train-sentences", sa.train, "training sentences")->capture_default_str();
  synth->add_option("--valid-sentences", sa.valid, "validation sentences")->capture_default_str();
  synth->add_option("--test-sentences", sa.test, "test sentences")->capture_default_str();
  synth->add_option("--topics", sa.opt.topics, "topics")->capture_default_str();
  synth->add_option("--words-per-topic", sa.opt.words_per_topic, "content words per topic")->capture_default_str();
  synth->add_option("--generic-words", sa.opt.generic_words, "topic-independent content words")->capture_default_str();
  synth->add_option("--function-words", sa.opt.function_words, "function words")->capture_default_str();
  synth->add_option("--min-length", sa.opt.min_length, "shortest sentence")->capture_default_str();
  synth->add_option("--max-length", sa.opt.max_length, "longest sentence")->capture_default_str();
  synth->add_option("--seed", sa.opt.seed, "random seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) {
      apply_config(train, ta.common);
      require(ta.arch, "--arch");
      require(ta.train, "--train");
      require(ta.valid, "--valid");
      require(ta.out, "--out");
      ta.cfg.reference = ta.reference == "previous" ? PlateauReference::PreviousEpoch : PlateauReference::BestSoFar;
      set_num_threads(ta.common.threads);
      return with_precision(ta.common.precision, [&](auto tag) { return run_train<decltype(tag)>(ta); });
    }
    if (eval->parsed()) {
      apply_config(eval, ea.common);
      require(ea.checkpoint, "--checkpoint");
      require(ea.test, "--test");
      set_num_threads(ea.common.threads);
      const auto bytes = read_file(ea.checkpoint);
      const auto prec = checkpoint_precision(bytes);
      if (!ea.common.precision.empty() && ea.common.precision != prec)
        throw InputError("checkpoint is " + prec + " but --precision " + ea.common.precision + " was requested");
      return with_precision(prec, [&](auto tag) { return run_eval<decltype(tag)>(ea, bytes); });
    }
    if (gc->parsed()) {
      apply_config(gc, ga.common);
      set_num_threads(ga.common.threads);
      return run_gradcheck(ga);
    }
    if (dump->parsed()) {
      apply_config(dump, da.common);
      require(da.checkpoint, "--checkpoint");
      set_num_threads(da.common.threads);
      const auto bytes = read_file(da.checkpoint);
      const auto prec = checkpoint_precision(bytes);
      if (!da.common.precision.empty() && da.common.precision != prec)
        throw InputError("checkpoint is " + prec + " but --precision " + da.common.precision + " was requested");
      return with_precision(prec, [&](auto tag) { return run_dump<decltype(tag)>(da, bytes); });
    }
    if (bench->parsed()) {
      apply_config(bench, ba.common);
      set_num_threads(ba.common.threads);
      return with_precision(ba.common.precision, [&](auto tag) { return run_bench<decltype(tag)>(ba); });
    }
    if (synth->parsed()) {
      apply_config(synth, sa.common);
      return run_synth(sa);
    }
  } catch (const CLI::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
