#include "mecq/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>

#include "mecq/config.hpp"
#include "mecq/diagnostics.hpp"
#include "mecq/errors.hpp"
#include "mecq/matrix_io.hpp"
#include "mecq/mec.hpp"
#include "mecq/trainer.hpp"

namespace fs = std::filesystem;

namespace mecq::cli {

namespace {

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
}

config::TrainConfig load_config(const std::string& path, std::vector<std::string> overrides,
                                std::optional<std::uint64_t> seed) {
  if (seed) overrides.push_back("seed=" + std::to_string(*seed));
  config::TrainConfig cfg;
  if (path.empty()) {
    config::Json j = config::to_json(cfg);
    config::apply_overrides(j, overrides);
    cfg = config::from_json(j);
  } else {
    cfg = config::load_file(path, overrides);
  }
  cfg = config::resolve(cfg);
  config::validate(cfg);
  return cfg;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw DataError("cannot write " + p.string());
  return f;
}

int train_one(const config::TrainConfig& cfg, const fs::path& dir, std::ostream& out, std::ostream& err) {
  auto [train_ds, val_ds] = train::prepare_data(cfg);

  std::optional<train::TrainState> teacher;
  if (cfg.setting == losses::Setting::B) {
    teacher = train::restore(train::load_checkpoint(cfg.teacher), {false});
    if (teacher->model.input_shape() != train_ds.sample_shape || teacher->model.classes() != train_ds.classes)
      throw ConfigError("teacher: checkpoint does not match the dataset");
  }

  fs::create_directories(dir / "checkpoints");
  fs::create_directories(dir / "diagnostics");
  train::TrainState state = train::init_state(cfg, train_ds, &err);
  {
    auto f = open_out(dir / "config.json");
    f << config::to_json(state.cfg).dump(2) << '\n';
  }
  auto metrics = open_out(dir / "metrics.csv");
  train::write_metrics_header(metrics);
  auto steps = open_out(dir / "steps.csv");
  losses::write_report_header(steps);

  train::TrainOptions opts;
  if (teacher) opts.teacher = &teacher->model;
  opts.on_step = [&](const train::StepRecord& r) { losses::write_report_row(steps, r.step, r.epoch, r.report); };
  opts.on_epoch = [&](const train::EpochMetrics& m) {
    train::write_metrics_row(metrics, m);
    metrics.flush();
    err << "epoch " << m.epoch << " lambda=" << m.lambda << " task=" << m.task << " mec=" << m.mec
        << " val_acc=" << m.val_acc << '\n';
  };
  const train::TrainResult result = train::train(state, train_ds, val_ds, opts);

  train::save_checkpoint(dir / "checkpoints" / "last.bin", result.last);
  train::save_checkpoint(dir / "checkpoints" / "best.bin", result.best);
  out << "run_dir=" << dir.string() << '\n';
  if (result.diverged) {
    err << "error: training diverged: " << result.message << '\n';
    out << "diverged=1\n";
    return kExitDiverged;
  }
  out << std::setprecision(6) << "best_val_acc=" << result.best_val_acc << '\n';
  return kExitOk;
}

data::Dataset dataset_for(const train::TrainState& state, const std::string& path) {
  data::Dataset ds;
  if (path.empty()) {
    ds = train::prepare_data(state.cfg).second;
  } else if (fs::is_directory(path)) {
    ds = data::load_cifar10(path, state.cfg.data.standardization, data::Split::Val);
  } else {
    ds = data::load_csv(path, data::Split::Val, state.model.classes());
  }
  if (ds.sample_shape != state.model.input_shape())
    throw DataError("dataset samples " + shape_str(ds.sample_shape) + " do not match the checkpoint's input " +
                    shape_str(state.model.input_shape()));
  if (ds.classes > state.model.classes()) throw DataError("dataset has more classes than the checkpoint's model");
  return ds;
}

fs::path default_diag_dir(const fs::path& checkpoint) {
  const fs::path parent = checkpoint.parent_path();
  if (parent.filename() == "checkpoints") return parent.parent_path() / "diagnostics";
  return parent / "diagnostics";
}

}  // namespace

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const config::TrainConfig base = load_config(args.config, args.overrides, args.seed);
    if (args.sweep <= 0) return train_one(base, args.out_dir, out, err);
    int worst = kExitOk;
    for (int i = 0; i < args.sweep; ++i) {
      config::TrainConfig cfg = base;
      cfg.seed = base.seed + static_cast<std::uint64_t>(i);
      const fs::path dir = fs::path(args.out_dir) / ("seed_" + std::to_string(cfg.seed));
      worst = std::max(worst, train_one(cfg, dir, out, err));
    }
    return worst;
  });
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    train::TrainState state = train::restore(train::load_checkpoint(args.checkpoint), {false});
    const data::Dataset ds = dataset_for(state, args.dataset);
    const double acc = train::evaluate(state.model, ds, state.cfg.batch_size);
    out << std::setprecision(17) << "val_acc=" << acc << '\n';
    return kExitOk;
  });
}

int cmd_diagnose(const DiagnoseArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    train::TrainState state = train::restore(train::load_checkpoint(args.checkpoint), {false});
    data::Dataset ds = dataset_for(state, args.dataset);
    if (args.samples < 1 || args.samples > ds.size())
      throw DataError("--samples " + std::to_string(args.samples) + " exceeds the dataset size " +
                      std::to_string(ds.size()));
    std::vector<Index> rows(static_cast<std::size_t>(args.samples));
    for (Index i = 0; i < args.samples; ++i) rows[static_cast<std::size_t>(i)] = i;
    ds = ds.subset(rows, ds.split);

    const diag::CollapseReport col = diag::rectified_entropy(diag::feature_matrix(state.model, ds));
    diag::HessianReport hes;
    {
      diag::SurrogateLoss loss(state.model, ds);
      diag::HessianOptions opts;
      opts.power_iters = args.power_iters;
      opts.probes = args.probes;
      opts.seed = args.seed;
      hes = diag::hessian_spectrum(loss.gradient_fn(), loss.point(), opts);
    }

    config::Json report;
    report["samples"] = args.samples;
    report["entropy"] = {{"H", col.entropy},
                         {"rank", col.rank},
                         {"N_rank", col.n_rank},
                         {"degenerate", col.degenerate},
                         {"singular_values", std::vector<double>(col.singular_values.data(),
                                                                 col.singular_values.data() + col.singular_values.size())}};
    report["hessian"] = {{"max_eig", hes.max_eig},     {"mean_eig", hes.mean_eig}, {"mean_stderr", hes.mean_stderr},
                         {"iterations", hes.iterations}, {"residual", hes.residual}, {"converged", hes.converged},
                         {"dim", hes.dim},             {"probes", hes.probes}};

    const fs::path dir = args.out_dir.empty() ? default_diag_dir(args.checkpoint) : fs::path(args.out_dir);
    fs::create_directories(dir);
    {
      auto f = open_out(dir / "report.json");
      f << report.dump(2) << '\n';
    }
    {
      auto f = open_out(dir / "singular_values.csv");
      f << "index,sigma\n" << std::setprecision(17);
      for (Index i = 0; i < col.singular_values.size(); ++i) f << i << ',' << col.singular_values(i) << '\n';
    }
    out << std::setprecision(10) << "entropy=" << col.entropy << '\n'
        << "rank=" << col.rank << '\n'
        << "n_rank=" << col.n_rank << '\n'
        << "max_eig=" << hes.max_eig << '\n'
        << "mean_eig=" << hes.mean_eig << '\n'
        << "report=" << (dir / "report.json").string() << '\n';
    return kExitOk;
  });
}

int cmd_mec_probe(const ProbeArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Matrix x = read_matrix(args.matrix);
    if (x.rows() != x.cols() || x.rows() == 0) throw DataError("mec-probe: expected a square Gram matrix");
    linalg::require_symmetric(x, "mec-probe");
    if (args.dim < 0) throw ConfigError("--dim must be non-negative");
    mec::MecConfig mc;
    mc.points = args.points;
    mc.order = args.expert_order;
    mc.validate();
    for (int k : args.orders)
      if (k < 1) throw ConfigError("--orders must be positive");

    const Index m = x.rows();
    const double mu = 0.5 * static_cast<double>(m + (args.dim > 0 ? args.dim : m));
    const double exact = mec::gram_length_exact(x, mu);

    out << "method,order,point,value,abs_error,converged\n" << std::setprecision(17);
    auto row = [&](const std::string& method, int order, double point, double value, bool conv) {
      out << method << ',' << order << ',' << point << ',' << value << ',' << std::abs(value - exact) << ','
          << (conv ? 1 : 0) << '\n';
    };
    row("exact", 0, 0.0, exact, true);
    for (int k : args.orders) {
      const auto t = mec::gram_expert_length(x, mu, 0.0, k);
      row("taylor", k, 0.0, t.value, t.converged);
    }
    // Without features there is no gate input; experts are weighted evenly.
    double moe = 0.0;
    bool moe_conv = true;
    for (double a : args.points) {
      const auto e = mec::gram_expert_length(x, mu, a, args.expert_order);
      row("expert", args.expert_order, a, e.value, e.converged);
      moe += e.value / static_cast<double>(args.points.size());
      moe_conv = moe_conv && e.converged;
    }
    row("moe", args.expert_order, 0.0, moe, moe_conv);
    return kExitOk;
  });
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quantization-aware training with maximum-entropy coding regularization"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Calibrate and train a quantized model");
  train_cmd->add_option("--config", ta.config, "JSON run config (defaults when omitted)");
  train_cmd->add_option("--set", ta.overrides, "Override a config key: key=value (dotted paths)");
  train_cmd->add_option("--seed", ta.seed, "Training seed");
  train_cmd->add_option("--out-dir", ta.out_dir, "Run directory")->capture_default_str();
  train_cmd->add_option("--sweep", ta.sweep, "Train this many consecutive seeds");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint");
  eval_cmd->add_option("--checkpoint", ea.checkpoint)->required();
  eval_cmd->add_option("--dataset", ea.dataset, "CSV file or CIFAR-10 directory (default: the run's val split)");

  DiagnoseArgs da;
  auto* diag_cmd = app.add_subcommand("diagnose", "Feature entropy and Hessian spectrum of a checkpoint");
  diag_cmd->add_option("--checkpoint", da.checkpoint)->required();
  diag_cmd->add_option("--dataset", da.dataset);
  diag_cmd->add_option("--samples", da.samples)->capture_default_str();
  diag_cmd->add_option("--out-dir", da.out_dir);
  diag_cmd->add_option("--power-iters", da.power_iters)->capture_default_str();
  diag_cmd->add_option("--probes", da.probes)->capture_default_str();
  diag_cmd->add_option("--seed", da.seed);

  ProbeArgs pa;
  auto* probe_cmd = app.add_subcommand("mec-probe", "Coding-length approximations for a Gram matrix dump");
  probe_cmd->add_option("--matrix", pa.matrix, "Gram matrix X in MECM format")->required();
  probe_cmd->add_option("--orders", pa.orders, "Single-point Taylor orders")->delimiter(',');
  probe_cmd->add_option("--points", pa.points, "Expansion points")->delimiter(',');
  probe_cmd->add_option("--expert-order", pa.expert_order)->capture_default_str();
  probe_cmd->add_option("--dim", pa.dim, "Feature dimension d (default m)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInvalid;
  }
  if (*train_cmd) return cmd_train(ta, out, err);
  if (*eval_cmd) return cmd_eval(ea, out, err);
  if (*diag_cmd) return cmd_diagnose(da, out, err);
  return cmd_mec_probe(pa, out, err);
}

}  // namespace mecq::cli
