#pragma once

// Command-line surface: `train`, `eval`, `gradcheck`, `hist-export`, `synth`.
// Precedence is flags > config file (flat JSON keyed by flag name) > defaults.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "histloss/data.hpp"
#include "histloss/embednet.hpp"
#include "histloss/error.hpp"
#include "histloss/eval.hpp"
#include "histloss/oracle.hpp"

namespace histloss::cli {

enum class Command { Train, Eval, Gradcheck, HistExport, Synth };

inline const char* to_string(Command c) {
  switch (c) {
    case Command::Train: return "train";
    case Command::Eval: return "eval";
    case Command::Gradcheck: return "gradcheck";
    case Command::HistExport: return "hist-export";
    case Command::Synth: return "synth";
  }
  return "?";
}

inline constexpr const char* kOutDirEnv = "HISTLOSS_OUT_DIR";
inline constexpr double kGradcheckTolerance = 1e-4;

struct RunConfig {
  Command command = Command::Train;
  std::optional<std::string> data_path;  // absent: synthetic data
  std::optional<std::string> eval_data_path;
  SyntheticSpec synthetic;
  TrainConfig train;
  std::string out;  // directory for train/eval/gradcheck, file for synth/hist-export
  std::string checkpoint;
  std::string split = "eval";
};

/// Raised for --help; carries the help text.
struct HelpRequested {
  std::string text;
};

namespace detail {

inline Error usage(const std::string& msg) { return Error(ErrorKind::InvalidConfig, msg); }

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = first + text.size();
  auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc() || res.ptr != last) {
    throw usage("--" + key + ": malformed value '" + text + "'");
  }
  return value;
}

inline double parse_real(const std::string& key, const std::string& text) {
  double v = 0.0;
  if (!histloss::detail::parse_real(text, v)) {
    throw usage("--" + key + ": malformed value '" + text + "'");
  }
  return v;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  for (auto field : histloss::detail::split_commas(text)) {
    out.push_back(parse_number<std::size_t>(key, std::string(histloss::detail::trim(field))));
  }
  return out;
}

struct OptionSpec {
  std::string name;
  std::string help;
  std::set<Command> commands;
  std::function<void(RunConfig&, const std::string&)> apply;
};

inline const std::set<Command> kDataCommands{Command::Train, Command::Eval, Command::HistExport};
inline const std::set<Command> kAll{Command::Train, Command::Eval, Command::Gradcheck,
                                    Command::HistExport, Command::Synth};

inline std::set<Command> with(std::set<Command> a, std::initializer_list<Command> extra) {
  a.insert(extra.begin(), extra.end());
  return a;
}

inline const std::vector<OptionSpec>& option_table() {
  using C = Command;
  static const std::vector<OptionSpec> table{
      {"data", "dataset CSV (class_id,f_1,...,f_D); default is synthetic data", kDataCommands,
       [](RunConfig& c, const std::string& v) { c.data_path = v; }},
      {"eval-data", "evaluation CSV; default splits --data by class", kDataCommands,
       [](RunConfig& c, const std::string& v) { c.eval_data_path = v; }},
      {"classes", "synthetic classes", with(kDataCommands, {C::Synth}),
       [](RunConfig& c, const std::string& v) {
         c.synthetic.num_classes = parse_number<std::size_t>("classes", v);
       }},
      {"per-class", "synthetic items per class", with(kDataCommands, {C::Synth}),
       [](RunConfig& c, const std::string& v) {
         c.synthetic.per_class = parse_number<std::size_t>("per-class", v);
       }},
      {"dim", "synthetic feature dimension", with(kDataCommands, {C::Synth}),
       [](RunConfig& c, const std::string& v) {
         c.synthetic.dim = parse_number<std::size_t>("dim", v);
       }},
      {"noise", "synthetic noise sigma", with(kDataCommands, {C::Synth}),
       [](RunConfig& c, const std::string& v) { c.synthetic.noise_sigma = parse_real("noise", v); }},
      {"loss", "histogram | histogram-margin | binomial-deviance | triplet-semihard",
       {C::Train, C::Gradcheck},
       [](RunConfig& c, const std::string& v) { c.train.loss.kind = parse_loss_kind(v); }},
      {"bins", "histogram nodes R (R-1 intervals of width 2/(R-1))",
       {C::Train, C::Gradcheck, C::HistExport},
       [](RunConfig& c, const std::string& v) {
         c.train.loss.bins = parse_number<std::size_t>("bins", v);
       }},
      {"mu", "margin in nodes for histogram-margin", {C::Train, C::Gradcheck},
       [](RunConfig& c, const std::string& v) {
         c.train.loss.mu = parse_number<std::size_t>("mu", v);
       }},
      {"alpha", "binomial deviance alpha", {C::Train, C::Gradcheck},
       [](RunConfig& c, const std::string& v) {
         c.train.loss.deviance.alpha = parse_real("alpha", v);
       }},
      {"beta", "binomial deviance beta", {C::Train, C::Gradcheck},
       [](RunConfig& c, const std::string& v) {
         c.train.loss.deviance.beta = parse_real("beta", v);
       }},
      {"cost", "binomial deviance negative cost C", {C::Train, C::Gradcheck},
       [](RunConfig& c, const std::string& v) {
         c.train.loss.deviance.cost = parse_real("cost", v);
       }},
      {"triplet-margin", "semi-hard triplet margin", {C::Train, C::Gradcheck},
       [](RunConfig& c, const std::string& v) {
         c.train.loss.triplet_margin = parse_real("triplet-margin", v);
       }},
      {"batch-size", "items per batch", {C::Train},
       [](RunConfig& c, const std::string& v) {
         c.train.batch.batch_size = parse_number<std::size_t>("batch-size", v);
       }},
      {"max-per-class", "max items of one class per batch", {C::Train},
       [](RunConfig& c, const std::string& v) {
         c.train.batch.max_per_class = parse_number<std::size_t>("max-per-class", v);
       }},
      {"lr", "ADAM learning rate", {C::Train},
       [](RunConfig& c, const std::string& v) { c.train.adam.lr = parse_real("lr", v); }},
      {"iterations", "training iterations", {C::Train},
       [](RunConfig& c, const std::string& v) {
         c.train.iterations = parse_number<std::size_t>("iterations", v);
       }},
      {"eval-interval", "iterations between evaluations", {C::Train},
       [](RunConfig& c, const std::string& v) {
         c.train.eval_interval = parse_number<std::size_t>("eval-interval", v);
       }},
      {"k", "comma-separated Recall@K values", {C::Train, C::Eval},
       [](RunConfig& c, const std::string& v) { c.train.ks = parse_list("k", v); }},
      {"hidden", "comma-separated hidden layer widths", {C::Train},
       [](RunConfig& c, const std::string& v) { c.train.hidden = parse_list("hidden", v); }},
      {"embedding-dim", "embedding dimension E", {C::Train},
       [](RunConfig& c, const std::string& v) {
         c.train.embedding_dim = parse_number<std::size_t>("embedding-dim", v);
       }},
      {"init", "mirrored | uniform", {C::Train},
       [](RunConfig& c, const std::string& v) {
         if (v == "mirrored") {
           c.train.init = InitScheme::Mirrored;
         } else if (v == "uniform") {
           c.train.init = InitScheme::Uniform;
         } else {
           throw usage("--init: expected mirrored or uniform, got '" + v + "'");
         }
       }},
      {"seed", "seed for data, initialization and sampling", kAll,
       [](RunConfig& c, const std::string& v) {
         c.train.seed = parse_number<std::uint64_t>("seed", v);
       }},
      {"out", "output directory (train, eval, gradcheck) or file (synth, hist-export)", kAll,
       [](RunConfig& c, const std::string& v) { c.out = v; }},
      {"checkpoint", "model checkpoint to load", {C::Eval, C::HistExport},
       [](RunConfig& c, const std::string& v) { c.checkpoint = v; }},
      {"split", "train | eval", {C::HistExport},
       [](RunConfig& c, const std::string& v) {
         if (v != "train" && v != "eval") throw usage("--split: expected train or eval");
         c.split = v;
       }},
  };
  return table;
}

inline std::string json_to_text(const std::string& key, const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer() || v.is_number_unsigned() || v.is_number_float()) return v.dump();
  if (v.is_array()) {
    std::string out;
    for (const auto& e : v) {
      if (!out.empty()) out += ',';
      out += json_to_text(key, e);
    }
    return out;
  }
  throw usage("config key '" + key + "' has an unsupported value type");
}

inline void check_conflicts(const RunConfig& cfg, const std::set<std::string>& set_keys) {
  auto given = [&](const char* k) { return set_keys.count(k) > 0; };
  const auto kind = cfg.train.loss.kind;
  if (given("mu") && kind != LossKind::HistogramMargin) {
    throw usage("--mu only applies to --loss histogram-margin");
  }
  for (const char* k : {"alpha", "beta", "cost"}) {
    if (given(k) && kind != LossKind::BinomialDeviance) {
      throw usage(std::string("--") + k + " only applies to --loss binomial-deviance");
    }
  }
  if (given("triplet-margin") && kind != LossKind::TripletSemihard) {
    throw usage("--triplet-margin only applies to --loss triplet-semihard");
  }
  if (given("data")) {
    for (const char* k : {"classes", "per-class", "dim", "noise"}) {
      if (given(k)) throw usage(std::string("--") + k + " conflicts with --data");
    }
  }
  if (given("eval-data") && !given("data")) throw usage("--eval-data requires --data");
}

inline void validate(const RunConfig& cfg) {
  check_nodes(cfg.train.loss.bins);
  if (cfg.train.ks.empty()) throw usage("--k needs at least one value");
  for (auto k : cfg.train.ks) {
    if (k == 0) throw usage("--k values must be positive");
  }
  if (cfg.train.batch.batch_size < 4) throw usage("--batch-size must be at least 4");
  if (cfg.train.batch.max_per_class < 2) throw usage("--max-per-class must be at least 2");
  if (cfg.train.eval_interval == 0) throw usage("--eval-interval must be at least 1");
  if (!(cfg.train.adam.lr > 0.0)) throw usage("--lr must be positive");
  if (cfg.train.embedding_dim == 0) throw usage("--embedding-dim must be positive");
  for (auto h : cfg.train.hidden) {
    if (h == 0) throw usage("--hidden widths must be positive");
  }
  if (!(cfg.train.loss.triplet_margin > 0.0)) throw usage("--triplet-margin must be positive");
  if (!(cfg.train.loss.deviance.cost > 0.0)) throw usage("--cost must be positive");
  if ((cfg.command == Command::Eval || cfg.command == Command::HistExport) &&
      cfg.checkpoint.empty()) {
    throw usage(std::string(to_string(cfg.command)) + " requires --checkpoint");
  }
}

inline std::string default_out(Command c) {
  const char* env = std::getenv(kOutDirEnv);
  const std::string dir = env != nullptr && *env != '\0' ? env : "out";
  if (c == Command::Synth) return (std::filesystem::path(dir) / "data.csv").string();
  if (c == Command::HistExport) return (std::filesystem::path(dir) / "histograms.csv").string();
  return dir;
}

}  // namespace detail

/// Parses `args` (without the program name) into a fully resolved config.
inline RunConfig parse_config(const std::vector<std::string>& args) {
  CLI::App app{"Histogram-loss metric learning toolkit", "histloss"};
  app.require_subcommand(1);
  std::map<std::string, std::string> raw;
  std::map<std::string, std::vector<CLI::Option*>> options;
  std::string config_path;
  std::map<Command, CLI::App*> subcommands;
  for (auto c : {Command::Train, Command::Eval, Command::Gradcheck, Command::HistExport,
                 Command::Synth}) {
    auto* sub = app.add_subcommand(to_string(c));
    sub->add_option("--config", config_path, "flat JSON config keyed by flag name");
    subcommands[c] = sub;
  }
  subcommands[Command::Train]->description("train an encoder and write metrics, model, histograms");
  subcommands[Command::Eval]->description("Recall@K of a checkpoint on the evaluation split");
  subcommands[Command::Gradcheck]->description("finite-difference check of the full gradient chain");
  subcommands[Command::HistExport]->description("export similarity histograms of a checkpoint");
  subcommands[Command::Synth]->description("write a synthetic dataset CSV");
  for (const auto& spec : detail::option_table()) {
    for (auto c : spec.commands) {
      options[spec.name].push_back(
          subcommands[c]->add_option("--" + spec.name, raw[spec.name], spec.help));
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    throw HelpRequested{app.help()};
  } catch (const CLI::ParseError& e) {
    throw detail::usage(e.what());
  }

  RunConfig cfg;
  for (const auto& [c, sub] : subcommands) {
    if (sub->parsed()) cfg.command = c;
  }
  cfg.train.ks = {1, 2, 4, 8};

  std::set<std::string> set_keys;
  auto apply = [&](const std::string& key, const std::string& value) {
    for (const auto& spec : detail::option_table()) {
      if (spec.name != key) continue;
      if (spec.commands.count(cfg.command) == 0) {
        throw detail::usage("'" + key + "' does not apply to " + to_string(cfg.command));
      }
      spec.apply(cfg, value);
      set_keys.insert(key);
      return;
    }
    throw detail::usage("unknown config key '" + key + "'");
  };

  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw detail::usage("cannot open config file '" + config_path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw detail::usage("config file '" + config_path + "': " + e.what());
    }
    if (!j.is_object()) throw detail::usage("config file must hold a flat JSON object");
    for (const auto& [key, value] : j.items()) apply(key, detail::json_to_text(key, value));
  }
  for (const auto& [name, opts] : options) {
    for (auto* opt : opts) {
      if (opt->count() > 0) apply(name, raw[name]);
    }
  }

  detail::check_conflicts(cfg, set_keys);
  if (cfg.out.empty()) cfg.out = detail::default_out(cfg.command);
  cfg.synthetic.seed = cfg.train.seed;
  detail::validate(cfg);
  return cfg;
}

/// Train and eval datasets for a config: CSV inputs, or synthetic data where the
/// eval set has fresh classes drawn with the next seed.
inline std::pair<Dataset, Dataset> resolve_datasets(const RunConfig& cfg) {
  if (cfg.data_path) {
    Dataset data = load_dataset(*cfg.data_path);
    if (cfg.eval_data_path) return {std::move(data), load_dataset(*cfg.eval_data_path)};
    return split_by_class(data);
  }
  SyntheticSpec train_spec = cfg.synthetic;
  SyntheticSpec eval_spec = cfg.synthetic;
  eval_spec.seed = train_spec.seed + 1;
  eval_spec.first_label = static_cast<int>(train_spec.num_classes);
  return {generate_synthetic(train_spec), generate_synthetic(eval_spec)};
}

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig: return 2;
    case ErrorKind::Data:
    case ErrorKind::BatchComposition:
    case ErrorKind::EmptySet: return 3;
    case ErrorKind::Numerical:
    case ErrorKind::DegenerateEmbedding: return 4;
    case ErrorKind::Io: return 5;
    case ErrorKind::Shape:
    case ErrorKind::ContractViolation: return 6;
  }
  return 1;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error(ErrorKind::Io, "failed writing '" + path.string() + "'");
}

inline std::filesystem::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create directory '" + dir + "': " + ec.message());
  return dir;
}

inline void ensure_parent(const std::string& file) {
  const auto parent = std::filesystem::path(file).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
}

}  // namespace detail

/// Executes a parsed config. Returns the process exit code; errors propagate.
inline int run(const RunConfig& cfg, std::ostream& out = std::cout) {
  switch (cfg.command) {
    case Command::Synth: {
      const auto data = generate_synthetic(cfg.synthetic);
      detail::ensure_parent(cfg.out);
      save_dataset(cfg.out, data);
      out << "wrote " << data.size() << " items (" << data.num_classes() << " classes, dim "
          << data.dim() << ") to " << cfg.out << '\n';
      return 0;
    }
    case Command::Train: {
      const auto [train_data, eval_data] = resolve_datasets(cfg);
      const auto result = train(cfg.train, train_data, eval_data);
      const auto dir = detail::ensure_dir(cfg.out);
      detail::write_text(dir / "metrics.json", to_json(result.report).dump(2) + "\n");
      save_checkpoint((dir / "model").string(), result.params, result.adam);
      export_histograms(result.eval_plus, result.eval_minus, (dir / "histograms.csv").string());
      out << "recall " << recall_json(result.report.recall).dump() << " overlap "
          << overlap_mass(result.eval_plus, result.eval_minus) << '\n';
      return 0;
    }
    case Command::Eval: {
      const auto ck = load_checkpoint(cfg.checkpoint);
      const auto [train_data, eval_data] = resolve_datasets(cfg);
      const auto r = evaluate(ck.params, eval_data, cfg.train.ks);
      nlohmann::json j{{"recall", recall_json(r.recall)},
                       {"meta",
                        {{"checkpoint", cfg.checkpoint},
                         {"queries", r.queries},
                         {"skipped_queries", r.skipped_queries}}}};
      const auto dir = detail::ensure_dir(cfg.out);
      detail::write_text(dir / "eval.json", j.dump(2) + "\n");
      out << j["recall"].dump() << '\n';
      return 0;
    }
    case Command::HistExport: {
      const auto ck = load_checkpoint(cfg.checkpoint);
      const auto [train_data, eval_data] = resolve_datasets(cfg);
      const Dataset& data = cfg.split == "train" ? train_data : eval_data;
      const auto [plus, minus] =
          similarity_histograms(embed(ck.params, data), data.labels(), cfg.train.loss.bins);
      detail::ensure_parent(cfg.out);
      export_histograms(plus, minus, cfg.out);
      out << "wrote " << plus.nodes() << " nodes to " << cfg.out << " (overlap "
          << overlap_mass(plus, minus) << ")\n";
      return 0;
    }
    case Command::Gradcheck: {
      oracle::EncoderCheckSpec spec;
      spec.loss = cfg.train.loss;
      spec.seed = cfg.train.seed;
      const auto report = oracle::check_encoder_gradients(spec);
      const auto j = oracle::to_json(report, kGradcheckTolerance);
      const auto dir = detail::ensure_dir(cfg.out);
      detail::write_text(dir / "gradcheck.json", j.dump(2) + "\n");
      nlohmann::json summary = j;
      summary.erase("errors");
      out << summary.dump() << '\n';
      if (report.max_rel_error >= kGradcheckTolerance) {
        throw Error(ErrorKind::Numerical, "gradient check failed: max relative error " +
                                              std::to_string(report.max_rel_error));
      }
      return 0;
    }
  }
  return 1;
}

namespace detail {

inline std::string one_line(std::string text) {
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  for (auto& ch : text) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return text;
}

}  // namespace detail

/// Full entry point: parse, run, map failures to exit codes with a one-line
/// diagnostic on `err`.
inline int main_entry(const std::vector<std::string>& args, std::ostream& out = std::cout,
                      std::ostream& err = std::cerr) {
  try {
    return run(parse_config(args), out);
  } catch (const HelpRequested& h) {
    out << h.text;
    return 0;
  } catch (const Error& e) {
    err << "histloss: " << detail::one_line(e.what()) << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "histloss: " << detail::one_line(e.what()) << '\n';
    return 1;
  }
}

}  // namespace histloss::cli
