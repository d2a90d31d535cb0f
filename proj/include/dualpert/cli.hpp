#pragma once

// Command-line driver. All options live on the root parser and subcommands
// fall through to it, so a flat key=value config file can set any of them;
// flags given on the command line take precedence over the file.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dualpert/eval.hpp"

namespace dualpert {

namespace cli_detail {

namespace fs = std::filesystem;

struct Options {
  std::uint64_t seed = 0;
  std::string out = ".";
  std::string data;
  std::vector<std::string> models;
  std::string model_out;
  std::string init;

  // gen-data
  std::size_t classes = 6;
  std::size_t samples = 3000;
  double train_fraction = 0.8;
  float amplitude = 0.15f;
  float separation = 0.25f;
  float min_size = 5.0f;
  float max_size = 7.0f;

  // train
  std::string method = "clean";
  std::size_t epochs = 10;
  std::size_t batch = 32;
  float lr = 1e-3f;
  float decay = 0.1f;
  std::vector<std::size_t> decay_epochs;

  // attack
  std::string attack = "dual";
  std::string norm = "l2";
  float eps_f = 0.5f;
  float eps_b = 2.5f;
  float lambda = 1.0f;
  std::size_t steps = 20;
  float alpha_f = 0.0f;
  float alpha_b = 0.0f;
  bool no_random_start = false;
  std::string salience = "dog";
  std::string fixation_net;
  std::string masks = "auto";
  std::size_t jsma_budget = 51;
  float jsma_theta = 1.0f;
  std::size_t count = 0;

  // smoothing
  float sigma = 0.25f;
  std::size_t rs_samples = 8;
  std::size_t n = 1;
  bool smoothed = false;

  // sweep
  std::string axis = "eps_b";
  std::vector<double> values;
  float eps_ratio = 0.0f;
  bool timing = false;
};

class RuntimeFailure : public Error {
 public:
  using Error::Error;
};

inline fs::path require_dir(const std::string& path, const char* what) {
  if (path.empty()) throw RuntimeFailure(std::string("no ") + what + " given");
  if (!fs::is_directory(path)) throw RuntimeFailure(std::string(what) + " not found: " + path);
  return path;
}

inline fs::path require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw RuntimeFailure(std::string(what) + " not found: " + path);
  return path;
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeFailure("cannot create output directory " + dir.string() + ": " + ec.message());
}

/// The full resolved configuration, one key=value per line, in option order.
inline std::vector<std::string> resolved_config(const CLI::App& app, const std::string& command) {
  std::vector<std::string> lines{"command=" + command};
  for (const CLI::Option* opt : app.get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    std::string value;
    if (opt->count() > 0) {
      const auto& res = opt->results();
      for (std::size_t i = 0; i < res.size(); ++i) value += (i ? "," : "") + res[i];
    } else {
      value = opt->get_default_str();
    }
    lines.push_back(name + "=" + value);
  }
  return lines;
}

inline SalienceModel salience_model(const Options& o) {
  SalienceModel m;
  m.method = parse_salience_method(o.salience);
  if (m.method == SalienceMethod::learned) {
    require_file(o.fixation_net, "fixation net");
    m.net = std::make_shared<FixationNet>(load_fixation_net(o.fixation_net));
  }
  return m;
}

/// AttackConfig from the options; `train` selects the training defaults for
/// options left unset (10 steps, lambda 0) instead of the evaluation ones.
inline AttackConfig attack_config(const Options& o, const CLI::App& app, bool train) {
  AttackConfig a = train ? default_training_attack() : default_eval_attack();
  a.norm = parse_norm(o.norm);
  a.eps_fg = o.eps_f;
  a.eps_bg = o.eps_b;
  a.lambda = (train && app.count("--lambda") == 0) ? 0.0f : o.lambda;
  a.steps = (train && app.count("--steps") == 0) ? 10 : o.steps;
  a.alpha_fg = o.alpha_f;
  a.alpha_bg = o.alpha_b;
  a.random_start = !o.no_random_start;
  a.seed = o.seed;
  a.salience = salience_model(o);
  a.validate();
  return a;
}

inline AttackSpec attack_spec(const Options& o, const CLI::App& app) {
  AttackSpec s;
  s.kind = parse_attack_name(o.attack);
  s.cfg = attack_config(o, app, false);
  s.rs_sigma = o.sigma;
  s.rs_samples = o.rs_samples;
  s.jsma_budget = o.jsma_budget;
  s.jsma_theta = o.jsma_theta;
  s.masks = parse_mask_source(o.masks);
  return s;
}

inline std::vector<EvalTarget> load_models(const Options& o) {
  if (o.models.empty()) throw RuntimeFailure("no --model given");
  std::vector<EvalTarget> out;
  for (const std::string& spec : o.models) {
    const auto eq = spec.find('=');
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    EvalTarget t;
    t.name = eq == std::string::npos ? fs::path(path).stem().string() : spec.substr(0, eq);
    t.params = load_params(require_file(path, "model file"));
    t.smoothed = o.smoothed;
    t.sigma = o.sigma;
    t.n = o.n;
    t.seed = o.seed;
    out.push_back(std::move(t));
  }
  return out;
}

inline Dataset load_data(const Options& o) {
  Dataset d = load_dataset(require_dir(o.data, "dataset directory"));
  if (o.count > 0 && o.count < d.size()) {
    std::vector<std::size_t> idx(o.count);
    std::iota(idx.begin(), idx.end(), 0);
    d = d.subset(idx);
  }
  return d;
}

inline void check_compatible(const EvalTarget& t, const Dataset& d) {
  const Architecture& a = t.params.arch;
  if (a.in_channels != d.channels() || a.height != d.height() || a.width != d.width()) {
    throw RuntimeFailure("model " + t.name + " expects " + std::to_string(a.in_channels) + "x" +
                         std::to_string(a.height) + "x" + std::to_string(a.width) + " inputs but the dataset has " +
                         shape_string({d.channels(), d.height(), d.width()}));
  }
  for (int y : d.labels) {
    if (static_cast<std::size_t>(y) >= a.classes) {
      throw RuntimeFailure("model " + t.name + " has fewer classes than the dataset labels");
    }
  }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void run_gen_data(const Options& o, std::ostream& out) {
  SynthConfig cfg;
  cfg.classes = o.classes;
  cfg.samples = o.samples;
  cfg.texture_amplitude = o.amplitude;
  cfg.separation = o.separation;
  cfg.min_size = o.min_size;
  cfg.max_size = o.max_size;
  cfg.seed = o.seed;
  const Dataset all = gen_synthetic(cfg);
  auto [train, test] = split(all, o.train_fraction, o.seed);
  const fs::path root = o.out;
  ensure_dir(root);
  save_dataset(root / "train", train);
  save_dataset(root / "test", test);
  std::ofstream meta(root / "meta.txt", std::ios::binary);
  meta << "# synthetic shapes dataset\n"
       << "k=" << cfg.classes << "\ntrain=" << train.size() << "\ntest=" << test.size() << "\nseed=" << o.seed << '\n';
  if (!meta) throw RuntimeFailure("failed writing " + (root / "meta.txt").string());
  out << "wrote " << train.size() << " training and " << test.size() << " test images to " << root.string() << '\n';
}

inline void run_train(const Options& o, const CLI::App& app, std::ostream& out) {
  const Dataset data = load_dataset(require_dir(o.data, "dataset directory"));
  const fs::path out_dir = o.out;
  ensure_dir(out_dir);
  const fs::path model_path = o.model_out.empty() ? out_dir / "model.dpt" : fs::path(o.model_out);
  const auto config = resolved_config(app, "train");
  if (o.method == "fixation") {
    FixationTrainConfig fc;
    fc.epochs = o.epochs;
    fc.batch = o.batch;
    fc.seed = o.seed;
    if (app.count("--lr")) fc.learning_rate = o.lr;
    std::vector<float> losses;
    const FixationNet net = train_fixation_net(data, fc, &losses);
    save_fixation_net(model_path, net);
    std::vector<TrainLogRow> log;
    for (std::size_t e = 0; e < losses.size(); ++e) log.push_back({e, losses[e], 0.0});
    write_train_log_csv(out_dir / "train_log.csv", log, config);
    out << "saved fixation net to " << model_path.string() << '\n';
    return;
  }
  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch = o.batch;
  tc.learning_rate = o.lr;
  tc.decay = o.decay;
  tc.decay_epochs = o.decay_epochs;
  tc.seed = o.seed;
  tc.masks = parse_mask_source(o.masks);
  if (!o.init.empty()) tc.init = load_params(require_file(o.init, "initial model"));
  std::vector<TrainLogRow> log;
  ClassifierParams params;
  if (o.method == "clean") {
    params = clean_train(data, tc, &log);
  } else if (o.method == "pgd" || o.method == "dual") {
    tc.attack = parse_attack_kind(o.method);
    tc.attack_cfg = attack_config(o, app, true);
    params = adv_train(data, tc, &log);
  } else if (o.method == "rs") {
    params = rs_train(data, tc, o.sigma, &log);
  } else {
    throw ArgumentError("unknown training method '" + o.method + "' (expected clean, pgd, dual, rs or fixation)");
  }
  save_params(model_path, params);
  write_train_log_csv(out_dir / "train_log.csv", log, config);
  out << "saved model to " << model_path.string() << " (final training accuracy "
      << format_number(log.empty() ? 0.0 : log.back().clean_acc) << ")\n";
}

inline std::vector<MaskPair> masks_for(const AttackSpec& spec, const Dataset& data) {
  if (!spec.uses_masks()) return {};
  return dataset_masks(data, spec.masks, spec.cfg.salience);
}

inline void run_attack(const Options& o, const CLI::App& app, std::ostream& out) {
  const std::vector<EvalTarget> models = load_models(o);
  const Dataset data = load_data(o);
  check_compatible(models[0], data);
  const AttackSpec spec = attack_spec(o, app);
  if (spec.kind == AttackName::none) throw ArgumentError("attack: choose an attack other than none");
  const std::vector<MaskPair> masks = masks_for(spec, data);
  const fs::path out_dir = o.out;
  ensure_dir(out_dir);
  const auto start = std::chrono::steady_clock::now();
  const Tensor adv = generate_adversarial(models[0], data, spec, masks);
  MetricsRow row;
  row.id = "attack-0000";
  row.model = models[0].name;
  row.attack = to_string(spec.kind);
  row.clean_acc = accuracy_of(target_predictions(models[0], data.images), data.labels);
  row.adv_acc = accuracy_of(target_predictions(models[0], adv), data.labels);
  if (spec.uses_masks()) row.mean_fs = mean_foreground_score(adv, masks, spec.cfg.salience);
  const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
  row.seconds = o.timing ? dt.count() : 0.0;
  save_tensor(out_dir / "adversarial.dpt", adv);
  const MetricsRow rows[1] = {row};
  write_metrics_csv(out_dir / "attack.csv", rows, resolved_config(app, "attack"));
  out << "adversarial accuracy " << format_number(*row.adv_acc) << " over " << data.size() << " images\n";
}

inline void run_eval(const Options& o, const CLI::App& app, std::ostream& out) {
  const std::vector<EvalTarget> models = load_models(o);
  const Dataset data = load_data(o);
  const AttackSpec spec = attack_spec(o, app);
  const std::vector<MaskPair> masks = masks_for(spec, data);
  std::vector<MetricsRow> rows;
  for (const EvalTarget& m : models) {
    check_compatible(m, data);
    const auto start = std::chrono::steady_clock::now();
    MetricsRow row = eval_accuracy(m, data, spec, masks);
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
    row.id = "eval-" + std::to_string(rows.size());
    row.seconds = o.timing ? dt.count() : 0.0;
    out << row.model << ": clean " << format_number(row.clean_acc) << " adversarial "
        << format_optional(row.adv_acc) << '\n';
    rows.push_back(std::move(row));
  }
  const fs::path out_dir = o.out;
  ensure_dir(out_dir);
  write_metrics_csv(out_dir / "eval.csv", rows, resolved_config(app, "eval"));
}

inline void run_sweep(const Options& o, const CLI::App& app, std::ostream& out) {
  const Dataset data = load_data(o);
  const std::vector<EvalTarget> models = load_models(o);
  for (const EvalTarget& m : models) check_compatible(m, data);
  if (o.values.empty()) throw ArgumentError("sweep: --values is required");
  const AttackSpec spec = attack_spec(o, app);
  SweepOptions so;
  if (app.count("--eps-ratio")) so.eps_ratio = o.eps_ratio;
  so.timing = o.timing;
  const std::vector<MetricsRow> rows = sweep(models, data, parse_sweep_axis(o.axis), o.values, spec, so);
  const fs::path out_dir = o.out;
  ensure_dir(out_dir);
  write_metrics_csv(out_dir / "sweep.csv", rows, resolved_config(app, "sweep"));
  out << "wrote " << rows.size() << " rows to " << (out_dir / "sweep.csv").string() << '\n';
}

inline void run_transfer(const Options& o, const CLI::App& app, std::ostream& out) {
  const Dataset data = load_data(o);
  const std::vector<EvalTarget> models = load_models(o);
  for (const EvalTarget& m : models) check_compatible(m, data);
  const AttackSpec spec = attack_spec(o, app);
  const auto m = transfer_matrix(models, data, spec);
  const fs::path out_dir = o.out;
  ensure_dir(out_dir);
  write_transfer_csv(out_dir / "transfer.csv", models, m, resolved_config(app, "transfer"));
  out << "wrote " << models.size() << "x" << models.size() << " transfer matrix to "
      << (out_dir / "transfer.csv").string() << '\n';
}

inline void run_gradviz(const Options& o, const CLI::App& app, std::ostream& out) {
  const std::vector<EvalTarget> models = load_models(o);
  const Dataset data = load_data(o);
  check_compatible(models[0], data);
  const std::vector<MaskPair> masks = dataset_masks(data, parse_mask_source(o.masks), salience_model(o));
  const fs::path out_dir = o.out;
  const auto records = gradviz(models[0].params, data, masks, data.size(), out_dir);
  write_gradviz_csv(out_dir / "gradviz.csv", records, resolved_config(app, "gradviz"));
  double mean = 0.0;
  for (const GradvizRecord& r : records) mean += r.fg_fraction;
  out << "wrote " << records.size() << " gradient maps; mean foreground fraction "
      << format_number(records.empty() ? 0.0 : mean / static_cast<double>(records.size())) << '\n';
}

}  // namespace cli_detail

/// Entry point shared by the executable and the tests. Returns 0 on success,
/// 1 on usage errors and 2 on runtime failures.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  Options o;
  CLI::App app{"Foreground/background adversarial perturbation toolkit", "dualpert"};
  app.set_config("--config", "", "key=value configuration file ('#' comments); flags override it");
  app.require_subcommand(1);

  app.add_option("--seed", o.seed, "Random seed")->capture_default_str();
  app.add_option("--out", o.out, "Output directory")->capture_default_str();
  app.add_option("--data", o.data, "Dataset directory");
  app.add_option("--model", o.models, "Model file, optionally name=path; repeatable");
  app.add_option("--model-out", o.model_out, "Where train writes the model (default <out>/model.dpt)");
  app.add_option("--init", o.init, "Start training from this model instead of a fresh initialization");

  app.add_option("--classes", o.classes, "Number of shape classes")->capture_default_str();
  app.add_option("--samples", o.samples, "Total generated images")->capture_default_str();
  app.add_option("--train-fraction", o.train_fraction, "Share of images in the training split")->capture_default_str();
  app.add_option("--amplitude", o.amplitude, "Background texture amplitude")->capture_default_str();
  app.add_option("--separation", o.separation, "Foreground/background intensity separation")->capture_default_str();
  app.add_option("--min-size", o.min_size, "Smallest shape radius in pixels")->capture_default_str();
  app.add_option("--max-size", o.max_size, "Largest shape radius in pixels")->capture_default_str();

  app.add_option("--method", o.method, "Training method: clean, pgd, dual, rs or fixation")->capture_default_str();
  app.add_option("--epochs", o.epochs, "Training epochs")->capture_default_str();
  app.add_option("--batch", o.batch, "Minibatch size")->capture_default_str();
  app.add_option("--lr", o.lr, "Initial learning rate")->capture_default_str();
  app.add_option("--decay", o.decay, "Learning-rate decay factor")->capture_default_str();
  app.add_option("--decay-epochs", o.decay_epochs, "Epochs at which the learning rate decays")->delimiter(',');

  app.add_option("--attack", o.attack, "Attack: none, pgd, dual, rs or jsma")->capture_default_str();
  app.add_option("--norm", o.norm, "Threat norm: l2 or linf")->capture_default_str();
  app.add_option("--eps-f,--eps", o.eps_f, "Foreground budget (the single budget for pgd)")->capture_default_str();
  app.add_option("--eps-b", o.eps_b, "Background budget")->capture_default_str();
  app.add_option("--lambda", o.lambda, "Salience weight (training default 0)")->capture_default_str();
  app.add_option("--steps", o.steps, "Attack iterations (training default 10)")->capture_default_str();
  app.add_option("--alpha-f", o.alpha_f, "Foreground step size (0: 2*eps/steps)")->capture_default_str();
  app.add_option("--alpha-b", o.alpha_b, "Background step size (0: 2*eps/steps)")->capture_default_str();
  app.add_flag("--no-random-start", o.no_random_start, "Start attacks from the clean image");
  app.add_option("--salience", o.salience, "Salience model: dog or learned")->capture_default_str();
  app.add_option("--fixation-net", o.fixation_net, "Trained fixation net for --salience learned");
  app.add_option("--masks", o.masks, "Mask source: auto, gt or fixation")->capture_default_str();
  app.add_option("--jsma-budget", o.jsma_budget, "JSMA pixel budget")->capture_default_str();
  app.add_option("--jsma-theta", o.jsma_theta, "JSMA per-step change")->capture_default_str();
  app.add_option("--count", o.count, "Use only the first N images (0: all)")->capture_default_str();

  app.add_option("--sigma", o.sigma, "Gaussian noise std for smoothing")->capture_default_str();
  app.add_option("--rs-samples", o.rs_samples, "Noise draws per smoothed gradient")->capture_default_str();
  app.add_option("--n", o.n, "Noise copies per smoothed prediction")->capture_default_str();
  app.add_flag("--smoothed", o.smoothed, "Evaluate models as smoothed classifiers");

  app.add_option("--axis", o.axis, "Sweep axis: eps_f, eps_b, eps, lambda, sigma or n")->capture_default_str();
  app.add_option("--values", o.values, "Sweep values, comma separated")->delimiter(',');
  app.add_option("--eps-ratio", o.eps_ratio, "Tie eps_b to ratio * eps_f when sweeping eps_f");
  app.add_flag("--timing", o.timing, "Record wall-clock seconds in CSV output");

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"gen-data", "Generate the synthetic shapes dataset"},
      {"train", "Train a classifier (clean, pgd, dual, rs) or a fixation net"},
      {"attack", "Attack one model and save the adversarial images"},
      {"eval", "Clean and adversarial accuracy of one or more models"},
      {"sweep", "Accuracy over a range of attack or smoothing parameters"},
      {"transfer", "Transferability matrix between models"},
      {"gradviz", "Input-gradient maps and foreground concentration"},
  };
  for (const Command& c : commands) app.add_subcommand(c.name, c.help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    if (argc <= 1) err << app.help();
    return 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "gen-data") run_gen_data(o, out);
    else if (command == "train") run_train(o, app, out);
    else if (command == "attack") run_attack(o, app, out);
    else if (command == "eval") run_eval(o, app, out);
    else if (command == "sweep") run_sweep(o, app, out);
    else if (command == "transfer") run_transfer(o, app, out);
    else if (command == "gradviz") run_gradviz(o, app, out);
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace dualpert
