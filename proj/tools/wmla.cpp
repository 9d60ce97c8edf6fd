// Command-line surface for the MLA conversion pipeline:
//   convert, verify, finetune, eval, mem-sweep, gradcheck, inspect.
// Exit codes: 0 success, 1 verification/metric failure, 2 usage error,
// 3 file-format error, 4 numerical error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "wmla/conversion.hpp"
#include "wmla/errors.hpp"
#include "wmla/memory_model.hpp"
#include "wmla/model.hpp"
#include "wmla/rng.hpp"
#include "wmla/training.hpp"

namespace {

using namespace wmla;

constexpr int kExitOk = 0;
constexpr int kExitVerification = 1;
constexpr int kExitUsage = 2;
constexpr int kExitFormat = 3;
constexpr int kExitNumerical = 4;

struct GlobalOpts {
  uint64_t seed = 0;
  bool quiet = false;
  std::string out;
};

std::ostream& info(const GlobalOpts& g) {
  static std::ostringstream sink;
  if (g.quiet) {
    sink.str("");
    return sink;
  }
  return std::cout;
}

void write_out_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ArgumentError("cannot open --out path '" + path + "'");
  f << content;
}

SyntheticTask task_from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ArgumentError("cannot open calibration file '" + path + "'");
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("calibration file: invalid JSON (" + std::string(e.what()) + ")");
  }
  SyntheticTask t;
  try {
    t.kind = task_kind_from_string(j.value("kind", "copy"));
    t.vocab_size = j.value("vocab_size", int64_t{64});
    t.min_len = j.value("min_len", int64_t{4});
    t.max_len = j.value("max_len", int64_t{16});
    t.sample_count = j.value("sample_count", int64_t{32});
    t.seed = j.value("seed", uint64_t{1});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("calibration file: " + std::string(e.what()));
  }
  return t;
}

struct ConvertOpts {
  std::string input, output, placement = "dso", strategy = "uniform", calib;
  int64_t latent_dim = 8;
  int64_t preserve = 1;
  bool preserve_given = false;
};

int cmd_convert(const GlobalOpts& g, const ConvertOpts& o) {
  ConversionSpec spec;
  spec.strategy = strategy_from_string(o.strategy);
  spec.placement = placement_from_string(o.placement);
  spec.d_latent = o.latent_dim;
  spec.r_per_head = o.preserve;
  spec.baseline_checkpoint = o.input;
  spec.calibration_ref = o.calib;
  spec.seed = g.seed;
  if (spec.strategy == Strategy::full_compression && !o.preserve_given) spec.r_per_head = 0;
  if (spec.strategy == Strategy::two_norm && o.calib.empty())
    throw ArgumentError("calibration required: --strategy 2norm needs --calib");

  std::optional<std::vector<Example>> calibration;
  if (spec.strategy == Strategy::two_norm)
    calibration = generate_dataset(task_from_json_file(o.calib));

  Model baseline = load_checkpoint(o.input);
  ConversionResult res = convert_model(baseline, spec, calibration ? &*calibration : nullptr);
  save_checkpoint(res.model, o.output);

  const int64_t d_model = res.model.spec.d_model;
  const int64_t n_pres = 2 * spec.r_per_head * res.model.spec.n_heads;
  info(g) << "converted " << o.input << " -> " << o.output << " (placement "
          << to_string(spec.placement) << ", strategy " << to_string(spec.strategy) << ")\n";
  info(g) << "KV cache reduction, key-only basis (per-token denominator d_model):    "
          << format_percent(reduction_ratio(ReductionBasis::key_only, d_model, spec.d_latent, n_pres))
          << "\n";
  info(g) << "KV cache reduction, key+value basis (per-token denominator 2*d_model): "
          << format_percent(reduction_ratio(ReductionBasis::key_value, d_model, spec.d_latent, n_pres))
          << "\n";
  info(g) << "per-layer joint-SVD reconstruction error:\n";
  std::ostringstream csv;
  csv << "# seed=" << g.seed << "\n";
  csv << "site_layer,frobenius_error,relative_error\n";
  for (const LayerConversionReport& r : res.report) {
    info(g) << "  " << r.site_layer << "  frobenius " << r.frobenius_error << "  relative "
            << r.relative_error << "\n";
    csv << r.site_layer << "," << r.frobenius_error << "," << r.relative_error << "\n";
  }
  if (!g.out.empty()) write_out_file(g.out, csv.str());
  return kExitOk;
}

struct VerifyOpts {
  std::string original, converted;
  double tolerance = 1e-6;
  int64_t trials = 10;
};

int cmd_verify(const GlobalOpts& g, const VerifyOpts& o) {
  Model a = load_checkpoint(o.original);
  Model b = load_checkpoint(o.converted);
  if (a.spec.vocab_size != b.spec.vocab_size || a.spec.d_model != b.spec.d_model)
    throw ArgumentError("verify: models have incompatible shapes");

  double max_logit_dev = 0.0, max_step_dev = 0.0;
  uint64_t worst_seed = g.seed;
  for (int64_t t = 0; t < o.trials; ++t) {
    const uint64_t trial_seed = g.seed + static_cast<uint64_t>(t);
    Rng rng(trial_seed);
    const int64_t src_len = 1 + rng.uniform_int(0, std::min<int64_t>(16, a.spec.max_source_len));
    const int64_t dec_len = 1 + rng.uniform_int(0, std::min<int64_t>(16, a.spec.max_target_len));
    std::vector<int> src, dec;
    for (int64_t i = 0; i < src_len; ++i)
      src.push_back(static_cast<int>(rng.uniform_int(kFirstContentToken, a.spec.vocab_size)));
    dec.push_back(kBosToken);
    for (int64_t i = 1; i < dec_len; ++i)
      dec.push_back(static_cast<int>(rng.uniform_int(kFirstContentToken, a.spec.vocab_size)));

    const double dev = linalg::max_abs_diff(forward_logits(a, src, dec), forward_logits(b, src, dec));
    if (dev > max_logit_dev) {
      max_logit_dev = dev;
      worst_seed = trial_seed;
    }
    for (const Model* m : {&a, &b}) {
      Matrix batch = forward_logits(*m, src, dec);
      Matrix enc_states = encode(*m, src);
      DecoderCaches caches = DecoderCaches::make(m->spec);
      for (size_t p = 0; p < dec.size(); ++p) {
        Matrix step = decode_step(*m, dec[p], static_cast<int64_t>(p), enc_states, caches);
        for (int64_t j = 0; j < step.cols(); ++j) {
          const double d = std::fabs(step.at(0, j) - batch.at(static_cast<int64_t>(p), j));
          if (d > max_step_dev) {
            max_step_dev = d;
            worst_seed = trial_seed;
          }
        }
      }
    }
  }
  info(g) << "max logit deviation:            " << max_logit_dev << "\n";
  info(g) << "max incremental-vs-batch delta: " << max_step_dev << "\n";
  if (!g.out.empty()) {
    std::ostringstream csv;
    csv << "# seed=" << g.seed << "\n";
    csv << "metric,value\nmax_logit_deviation," << max_logit_dev << "\nmax_step_deviation,"
        << max_step_dev << "\n";
    write_out_file(g.out, csv.str());
  }
  if (max_logit_dev > o.tolerance || max_step_dev > o.tolerance) {
    std::cerr << "verification failed: deviation exceeds tolerance " << o.tolerance
              << " (worst input seed " << worst_seed << ")\n";
    return kExitVerification;
  }
  info(g) << "within tolerance " << o.tolerance << "\n";
  return kExitOk;
}

struct TaskOpts {
  std::string task = "copy";
  int64_t vocab = 64;
  int64_t min_len = 4;
  int64_t max_len = 16;
  int64_t samples = 2000;
  uint64_t task_seed = 1;

  SyntheticTask to_task() const {
    SyntheticTask t;
    t.kind = task_kind_from_string(task);
    t.vocab_size = vocab;
    t.min_len = min_len;
    t.max_len = max_len;
    t.sample_count = samples;
    t.seed = task_seed;
    return t;
  }
};

void add_task_flags(CLI::App* cmd, TaskOpts& t) {
  cmd->add_option("--task", t.task, "Synthetic task kind (copy|reverse)")
      ->check(CLI::IsMember({"copy", "reverse"}));
  cmd->add_option("--vocab", t.vocab, "Task vocabulary size");
  cmd->add_option("--min-len", t.min_len, "Minimum sequence length");
  cmd->add_option("--max-len", t.max_len, "Maximum sequence length");
  cmd->add_option("--samples", t.samples, "Dataset size");
  cmd->add_option("--task-seed", t.task_seed, "Dataset seed");
}

struct FinetuneOpts {
  std::string input, output, optimizer = "adam", freeze = "none";
  bool init_toy = false;
  int64_t epochs = 3;
  double lr = 1e-3;
  int64_t batch_size = 32;
  double clip = 1.0;
  TaskOpts task;
};

std::string trace_csv(const std::vector<EpochMetric>& trace, uint64_t seed) {
  std::ostringstream csv;
  csv << "# seed=" << seed << "\n";
  csv << "epoch,split,loss,token_accuracy\n";
  for (const EpochMetric& e : trace)
    csv << e.epoch << "," << e.split << "," << e.loss << "," << e.token_accuracy << "\n";
  return csv.str();
}

int cmd_finetune(const GlobalOpts& g, const FinetuneOpts& o) {
  if (o.input.empty() && !o.init_toy)
    throw ArgumentError("finetune needs --input CHECKPOINT or --init-toy");
  Model model = o.init_toy ? Model::random_init(ModelSpec::toy(), g.seed)
                           : load_checkpoint(o.input);
  TrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.learning_rate = o.lr;
  cfg.batch_size = o.batch_size;
  cfg.optimizer = o.optimizer == "sgd" ? TrainConfig::Optimizer::sgd : TrainConfig::Optimizer::adam;
  cfg.gradient_clip = o.clip;
  cfg.seed = g.seed;
  const FreezeSet freeze = o.freeze == "dso" ? FreezeSet::dso() : FreezeSet::none();

  FinetuneResult res = finetune(std::move(model), o.task.to_task(), cfg, freeze);
  save_checkpoint(res.model, o.output);
  for (const EpochMetric& e : res.trace)
    info(g) << "epoch " << e.epoch << " " << e.split << ": loss " << e.loss << ", token accuracy "
            << e.token_accuracy << "\n";
  info(g) << "saved " << o.output << "\n";
  if (!g.out.empty()) write_out_file(g.out, trace_csv(res.trace, g.seed));
  return kExitOk;
}

struct EvalOpts {
  std::string input, split = "heldout";
  double min_accuracy = -1.0;
  TaskOpts task;
};

int cmd_eval(const GlobalOpts& g, const EvalOpts& o) {
  Model model = load_checkpoint(o.input);
  DatasetSplit split = split_dataset(generate_dataset(o.task.to_task()));
  std::vector<Example> examples;
  if (o.split == "train") examples = split.train;
  else if (o.split == "heldout") examples = split.heldout;
  else {
    examples = split.train;
    examples.insert(examples.end(), split.heldout.begin(), split.heldout.end());
  }
  EvalMetrics m = evaluate(model, examples);
  info(g) << o.split << ": loss " << m.loss << ", token accuracy " << m.token_accuracy << "\n";
  if (!g.out.empty()) {
    std::ostringstream csv;
    csv << "# seed=" << g.seed << "\n";
    csv << "split,loss,token_accuracy\n" << o.split << "," << m.loss << "," << m.token_accuracy
        << "\n";
    write_out_file(g.out, csv.str());
  }
  if (o.min_accuracy >= 0.0 && m.token_accuracy < o.min_accuracy) {
    std::cerr << "accuracy " << m.token_accuracy << " below required " << o.min_accuracy << "\n";
    return kExitVerification;
  }
  return kExitOk;
}

struct SweepOpts {
  std::string preset = "whisper-small", placement = "dso";
  std::vector<int64_t> batches = {1, 4, 16, 64};
  std::vector<int64_t> lengths = {256, 512, 1024, 2048, 4096};
  int64_t source_len = -1;
  int64_t budget = -1;
  int64_t d_model = -1, n_heads = -1, enc_layers = -1, dec_layers = -1;
  int64_t latent_dim = -1, preserve = -1, bytes_per_entry = -1;
};

int cmd_mem_sweep(const GlobalOpts& g, const SweepOpts& o) {
  MemConfig cfg = o.preset == "toy" ? MemConfig::toy() : MemConfig::whisper_small();
  if (o.d_model > 0) cfg.d_model = o.d_model;
  if (o.n_heads > 0) cfg.n_heads = o.n_heads;
  if (o.enc_layers > 0) cfg.n_encoder_layers = o.enc_layers;
  if (o.dec_layers > 0) cfg.n_decoder_layers = o.dec_layers;
  if (o.latent_dim > 0) cfg.d_latent = o.latent_dim;
  if (o.preserve >= 0) cfg.r_per_head = o.preserve;
  if (o.bytes_per_entry > 0) cfg.bytes_per_entry = o.bytes_per_entry;
  const int64_t source_len = o.source_len > 0 ? o.source_len : (o.preset == "toy" ? 64 : 1500);
  const std::optional<int64_t> budget =
      o.budget > 0 ? std::optional<int64_t>(o.budget) : std::nullopt;

  SweepResult res = sweep(cfg, mem_placement_from_string(o.placement), o.batches, o.lengths,
                          source_len, budget);
  info(g) << "KV cache reduction, key-only basis:  "
          << format_percent(reduction_ratio(ReductionBasis::key_only, cfg.d_model, cfg.d_latent,
                                            cfg.n_preserved()))
          << "\n";
  info(g) << "KV cache reduction, key+value basis: "
          << format_percent(reduction_ratio(ReductionBasis::key_value, cfg.d_model, cfg.d_latent,
                                            cfg.n_preserved()))
          << "\n";
  for (const SweepRow& r : res.rows)
    info(g) << r.model << " batch " << r.batch << " len " << r.seq_len << ": "
            << r.fp.bytes_total << " bytes" << (r.oom ? "  [OOM]" : "") << "\n";
  if (!g.out.empty()) write_out_file(g.out, res.to_csv());
  return kExitOk;
}

struct GradcheckOpts {
  std::string variant = "mha";
  int64_t coords = 50;
  int64_t batch_samples = 2;
  int64_t max_len = 5;
};

int cmd_gradcheck(const GlobalOpts& g, const GradcheckOpts& o) {
  ModelSpec spec = ModelSpec::toy();
  if (o.variant != "mha") {
    const AttentionVariant v = o.variant == "mla-full" ? AttentionVariant::mla_full
                                                       : AttentionVariant::mla_preserving;
    for (Site s : {Site::encoder_self, Site::decoder_self, Site::cross}) {
      spec.site(s).variant = v;
      spec.site(s).d_latent = 8;
      spec.site(s).r_per_head = v == AttentionVariant::mla_preserving ? 1 : 0;
    }
  }
  Model model = Model::random_init(spec, g.seed);
  SyntheticTask task;
  task.sample_count = o.batch_samples;
  task.min_len = 2;
  task.max_len = o.max_len;
  task.seed = g.seed + 1;
  FdReport rep = finite_diff_check(model, generate_dataset(task), o.coords, g.seed + 2);

  info(g) << "sampled " << rep.coords.size() << " coordinates of the " << o.variant << " model\n";
  for (const auto& [tensor, err] : rep.per_tensor_max)
    info(g) << "  " << tensor << ": max rel err " << err << "\n";
  info(g) << "max relative error: " << rep.max_rel_err << "\n";
  if (!g.out.empty()) {
    std::ostringstream csv;
    csv << "# seed=" << g.seed << "\n";
    csv << "tensor,index,analytic,numeric,rel_err\n";
    for (const FdCoordinate& c : rep.coords)
      csv << c.tensor << "," << c.index << "," << c.analytic << "," << c.numeric << ","
          << c.rel_err << "\n";
    write_out_file(g.out, csv.str());
  }
  if (!rep.ok()) {
    std::cerr << "gradient check failed: max relative error " << rep.max_rel_err << " > "
              << rep.flag_threshold << "\n";
    return kExitVerification;
  }
  return kExitOk;
}

struct InspectOpts {
  std::string input;
};

int cmd_inspect(const GlobalOpts& g, const InspectOpts& o) {
  CheckpointContainer c = CheckpointContainer::read_file(o.input);
  nlohmann::ordered_json j;
  j["model_spec"] = c.model_spec;
  j["conversion_spec"] = c.conversion_spec;
  nlohmann::ordered_json sel = nlohmann::ordered_json::object();
  nlohmann::ordered_json tens = nlohmann::ordered_json::array();
  int64_t total_bytes = 0;
  for (const TensorRecord& t : c.tensors) {
    nlohmann::ordered_json e;
    e["name"] = t.name;
    e["dtype"] = to_string(t.dtype);
    e["shape"] = t.shape;
    tens.push_back(e);
    total_bytes += static_cast<int64_t>(t.bytes.size());
    if (t.name.size() > 10 && t.name.substr(t.name.size() - 10) == ".selection")
      sel[t.name] = CheckpointContainer::as_i32(t);
  }
  j["selections"] = sel;
  j["tensor_count"] = static_cast<int64_t>(c.tensors.size());
  j["payload_bytes"] = total_bytes;
  j["tensors"] = tens;
  std::cout << j.dump(2) << "\n";
  if (!g.out.empty()) write_out_file(g.out, j.dump(2) + "\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-attention conversion toolkit for toy encoder-decoder transformers"};
  app.require_subcommand(1);
  GlobalOpts g;
  app.add_option("--seed", g.seed, "Seed recorded in all randomized outputs")->capture_default_str();
  app.add_flag("--quiet", g.quiet, "Suppress human-readable output");
  app.add_option("--out", g.out, "Machine-readable output path (CSV/JSON)");

  ConvertOpts conv;
  CLI::App* c_conv = app.add_subcommand("convert", "Convert an MHA checkpoint to MLA");
  c_conv->add_option("--input", conv.input, "Baseline checkpoint")->required();
  c_conv->add_option("--output", conv.output, "Converted checkpoint path")->required();
  c_conv->add_option("--placement", conv.placement, "Sites to convert (full|dso)")
      ->check(CLI::IsMember({"full", "dso"}));
  c_conv->add_option("--strategy", conv.strategy,
                     "Dimension selection (full-compression|uniform|2norm)")
      ->check(CLI::IsMember({"full-compression", "uniform", "2norm"}));
  c_conv->add_option("--latent-dim", conv.latent_dim, "Joint latent width")->capture_default_str();
  CLI::Option* pres =
      c_conv->add_option("--preserve-per-head", conv.preserve, "Preserved subspaces per head")
          ->capture_default_str();
  c_conv->add_option("--calib", conv.calib, "Calibration task JSON (required for 2norm)");
  c_conv->callback([&conv, pres] { conv.preserve_given = pres->count() > 0; });

  VerifyOpts ver;
  CLI::App* c_ver = app.add_subcommand("verify", "Compare two checkpoints on seeded inputs");
  c_ver->add_option("--original", ver.original)->required();
  c_ver->add_option("--converted", ver.converted)->required();
  c_ver->add_option("--tolerance", ver.tolerance)->capture_default_str();
  c_ver->add_option("--trials", ver.trials)->capture_default_str();

  FinetuneOpts ft;
  CLI::App* c_ft = app.add_subcommand("finetune", "Train on a synthetic task");
  c_ft->add_option("--input", ft.input, "Starting checkpoint");
  c_ft->add_flag("--init-toy", ft.init_toy, "Start from a fresh toy baseline");
  c_ft->add_option("--output", ft.output, "Trained checkpoint path")->required();
  c_ft->add_option("--epochs", ft.epochs)->capture_default_str();
  c_ft->add_option("--lr", ft.lr)->capture_default_str();
  c_ft->add_option("--batch-size", ft.batch_size)->capture_default_str();
  c_ft->add_option("--optimizer", ft.optimizer)->check(CLI::IsMember({"adam", "sgd"}));
  c_ft->add_option("--clip", ft.clip, "Gradient-norm clip, <=0 disables")->capture_default_str();
  c_ft->add_option("--freeze", ft.freeze, "Freeze policy (none|dso)")
      ->check(CLI::IsMember({"none", "dso"}));
  add_task_flags(c_ft, ft.task);

  EvalOpts ev;
  CLI::App* c_ev = app.add_subcommand("eval", "Evaluate a checkpoint on a synthetic task");
  c_ev->add_option("--input", ev.input)->required();
  c_ev->add_option("--split", ev.split)->check(CLI::IsMember({"train", "heldout", "all"}));
  c_ev->add_option("--min-accuracy", ev.min_accuracy, "Exit 1 if accuracy falls below");
  add_task_flags(c_ev, ev.task);

  SweepOpts sw;
  CLI::App* c_sw = app.add_subcommand("mem-sweep", "Analytic KV-cache memory sweep");
  c_sw->add_option("--preset", sw.preset)->check(CLI::IsMember({"whisper-small", "toy"}));
  c_sw->add_option("--placement", sw.placement)->check(CLI::IsMember({"dso", "full"}));
  c_sw->add_option("--batches", sw.batches)->delimiter(',');
  c_sw->add_option("--lengths", sw.lengths)->delimiter(',');
  c_sw->add_option("--source-len", sw.source_len, "Encoder length (default 1500, toy 64)");
  c_sw->add_option("--budget-bytes", sw.budget, "OOM budget");
  c_sw->add_option("--d-model", sw.d_model);
  c_sw->add_option("--n-heads", sw.n_heads);
  c_sw->add_option("--enc-layers", sw.enc_layers);
  c_sw->add_option("--dec-layers", sw.dec_layers);
  c_sw->add_option("--latent-dim", sw.latent_dim);
  c_sw->add_option("--preserve-per-head", sw.preserve);
  c_sw->add_option("--bytes-per-entry", sw.bytes_per_entry);

  GradcheckOpts gc;
  CLI::App* c_gc = app.add_subcommand("gradcheck", "Finite-difference gradient validation");
  c_gc->add_option("--variant", gc.variant)
      ->check(CLI::IsMember({"mha", "mla-full", "mla-preserving"}));
  c_gc->add_option("--coords", gc.coords)->capture_default_str();
  c_gc->add_option("--batch-samples", gc.batch_samples)->capture_default_str();
  c_gc->add_option("--max-len", gc.max_len)->capture_default_str();

  InspectOpts in;
  CLI::App* c_in = app.add_subcommand("inspect", "Dump a checkpoint header");
  c_in->add_option("--input", in.input)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (c_conv->parsed()) return cmd_convert(g, conv);
    if (c_ver->parsed()) return cmd_verify(g, ver);
    if (c_ft->parsed()) return cmd_finetune(g, ft);
    if (c_ev->parsed()) return cmd_eval(g, ev);
    if (c_sw->parsed()) return cmd_mem_sweep(g, sw);
    if (c_gc->parsed()) return cmd_gradcheck(g, gc);
    if (c_in->parsed()) return cmd_inspect(g, in);
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitUsage;
}
