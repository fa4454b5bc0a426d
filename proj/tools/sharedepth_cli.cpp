// sharedepth: command-line driver for data generation, the three training
// stages, structure search, evaluation and the Monte-Carlo oracle.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sharedepth/checkpoint.hpp"
#include "sharedepth/config.hpp"
#include "sharedepth/data.hpp"
#include "sharedepth/fisher.hpp"
#include "sharedepth/info.hpp"
#include "sharedepth/oracle.hpp"
#include "sharedepth/pipeline.hpp"

namespace sd = sharedepth;

namespace {

struct Overrides {
  std::string config;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::vector<int> grid_c;
  std::vector<double> grid_w;
  std::optional<double> tau;
  std::optional<int> resamples;
  std::optional<int> train_size;
  bool no_refine = false;
  int trials = 1000;
};

struct Context {
  sd::CommandConfig cfg;
  sd::RunDir dir;
};

Context resolve(const Overrides& o, const std::string& command) {
  sd::CommandConfig c = o.config.empty() ? sd::CommandConfig{} : sd::load_config(o.config);
  if (o.seed) {
    c.data.gen.seed = *o.seed;
    c.oracle.seed = *o.seed;
  }
  if (o.jobs) c.oracle.jobs = *o.jobs;
  if (!o.grid_c.empty()) c.run.grid_c = o.grid_c;
  if (!o.grid_w.empty()) c.run.grid_w = o.grid_w;
  if (o.tau) c.run.tau = *o.tau;
  if (o.resamples) c.oracle.resamples = *o.resamples;
  if (o.train_size) c.oracle.train_size = *o.train_size;
  if (o.no_refine) {
    c.run.refine_enabled = false;
    c.oracle.refine = false;
  }
  sd::validate(c);
  Context ctx{c, sd::RunDir(o.out)};
  if (command != "verify-lemma") sd::write_json(ctx.dir.next("config", "json"), sd::to_json(c));
  return ctx;
}

// ---------------------------------------------------------------------------
// Artifact helpers.

struct Datasets {
  sd::LongTailDataset train;
  sd::LongTailDataset test;
};

Datasets load_datasets(const Context& ctx) {
  const int K = ctx.cfg.data.train_csv.empty() ? ctx.cfg.data.gen.classes : 0;
  Datasets d{sd::load_csv(ctx.dir.latest("train", "csv"), K), sd::load_csv(ctx.dir.latest("test", "csv"), K)};
  const int k = std::max(d.train.num_classes, d.test.num_classes);
  d.train.num_classes = d.test.num_classes = k;
  return d;
}

sd::Stage1Result load_stage1(const Context& ctx, const sd::ModelSpec& spec) {
  sd::Stage1Result s1;
  auto a = sd::load_checkpoint(ctx.dir.latest("stage1_A", "ckpt"));
  auto b = sd::load_checkpoint(ctx.dir.latest("stage1_B", "ckpt"));
  if (!(a.spec.trunk_widths == spec.trunk_widths && a.spec.head_dims == spec.head_dims &&
        a.spec.input_dim == spec.input_dim && b.params.same_layout(a.params)))
    throw sd::StructuralError("Stage-1 checkpoints do not match the configured model");
  s1.params_a = std::move(a.params);
  s1.params_b = std::move(b.params);
  s1.fisher_a.values = sd::load_array(ctx.dir.latest("fisher_A", "bin"));
  s1.fisher_b.values = sd::load_array(ctx.dir.latest("fisher_B", "bin"));
  return s1;
}

void write_losses(const std::filesystem::path& path, const std::vector<std::vector<double>>& cols,
                  const std::vector<std::string>& names) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw sd::MissingArtifactError("cannot write " + path.string());
  out << "epoch";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  const std::size_t rows = cols.empty() ? 0 : cols.front().size();
  for (std::size_t e = 0; e < rows; ++e) {
    out << e + 1;
    for (const auto& c : cols) out << ',' << sd::fmt(c[e]);
    out << '\n';
  }
}

struct Selection {
  int C = 0;
  double w_a = 0.5;
};

Selection load_selection(const Context& ctx) {
  const auto j = sd::read_json(ctx.dir.latest("selection", "json"));
  return {j.at("C").get<int>(), j.at("w_A").get<double>()};
}

// ---------------------------------------------------------------------------
// Commands.

void gen_data(const Context& ctx) {
  const auto& d = ctx.cfg.data;
  sd::LongTailDataset train, test;
  if (!d.train_csv.empty()) {
    const auto full = sd::load_csv(d.train_csv);
    if (d.test_csv.empty()) {
      std::tie(train, test) = sd::holdout_split(full, d.test_fraction, sd::mix_seed(d.gen.seed, 2));
    } else {
      train = full;
      test = sd::load_csv(d.test_csv, full.num_classes);
    }
  } else {
    const auto full = sd::generate(d.gen);
    std::tie(train, test) = sd::holdout_split(full, d.test_fraction, sd::mix_seed(d.gen.seed, 2));
    sd::write_json(ctx.dir.next("generator", "json"), sd::to_json(sd::make_generator(d.gen)));
  }
  const auto train_path = ctx.dir.next("train", "csv");
  const auto test_path = ctx.dir.next("test", "csv");
  sd::save_csv(train, train_path);
  sd::save_csv(test, test_path);
  std::cout << "gen-data: " << train.size() << " train rows -> " << train_path.string() << ", " << test.size()
            << " test rows -> " << test_path.string() << '\n';
}

void stage1_cmd(const Context& ctx) {
  const auto data = sd::prepare(load_datasets(ctx).train, ctx.cfg.run);
  const auto s1 = sd::stage1(ctx.cfg.run, data);
  sd::save_checkpoint(ctx.dir.next("stage1_A", "ckpt"), data.spec, s1.params_a);
  sd::save_checkpoint(ctx.dir.next("stage1_B", "ckpt"), data.spec, s1.params_b);
  sd::save_array(ctx.dir.next("fisher_A", "bin"), s1.fisher_a.values);
  sd::save_array(ctx.dir.next("fisher_B", "bin"), s1.fisher_b.values);
  write_losses(ctx.dir.next("stage1_loss", "csv"), {s1.loss_a, s1.loss_b}, {"loss_A", "loss_B"});
  std::cout << "stage1: final BCE A " << s1.loss_a.back() << ", B " << s1.loss_b.back() << " ("
            << data.spec.total_param_count() << " parameters)\n";
}

void search_cmd(const Context& ctx) {
  const auto train = load_datasets(ctx).train;
  const auto split = sd::split_classes(train.class_counts());
  const auto spec = sd::model_spec_for(ctx.cfg.run, static_cast<int>(train.features.cols()), split);
  const auto s1 = load_stage1(ctx, spec);
  const auto t0 = std::chrono::steady_clock::now();
  const auto grid = sd::select_structure(s1, spec, train.size(), ctx.cfg.run.c_candidates(), ctx.cfg.run.grid_w);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  sd::write_grid_csv(grid.table, ctx.dir.next("proxy_grid", "csv"));
  const auto& best = grid.best();
  nlohmann::json sel{{"format", "sharedepth-selection/1"},
                     {"C", grid.best_C},
                     {"w_A", grid.best_w},
                     {"w_B", 1.0 - grid.best_w},
                     {"N", train.size()},
                     {"encoder_variance", best.encoder_variance},
                     {"encoder_bias", best.encoder_bias},
                     {"decoder_variance", best.decoder_variance},
                     {"total", best.total},
                     {"grid_c", ctx.cfg.run.c_candidates()},
                     {"grid_w", ctx.cfg.run.grid_w}};
  sd::write_json(ctx.dir.next("selection", "json"), sel);
  std::printf("search: %zu cells in %.3f s, selected C=%d w_A=%.2f (proxy %.6g)\n", grid.table.size(), secs,
              grid.best_C, grid.best_w, best.total);
}

void stage2_cmd(const Context& ctx) {
  const auto data = sd::prepare(load_datasets(ctx).train, ctx.cfg.run);
  const auto sel = load_selection(ctx);
  std::optional<sd::Stage1Result> s1;
  if (ctx.cfg.run.warm_start) s1 = load_stage1(ctx, data.spec);
  const auto s2 = sd::stage2(ctx.cfg.run, data, sel.w_a, s1 ? &*s1 : nullptr);
  sd::save_checkpoint(ctx.dir.next("stage2", "ckpt"), data.spec, s2.params);
  write_losses(ctx.dir.next("stage2_loss", "csv"), {s2.epoch_loss}, {"loss"});
  std::cout << "stage2: w_A=" << sel.w_a << ", final objective " << s2.epoch_loss.back() << '\n';
}

void assemble_cmd(const Context& ctx) {
  const auto data = sd::prepare(load_datasets(ctx).train, ctx.cfg.run);
  const auto sel = load_selection(ctx);
  const auto s1 = load_stage1(ctx, data.spec);
  const auto s2 = sd::load_checkpoint(ctx.dir.latest("stage2", "ckpt"));
  const auto model =
      sd::assemble(data.spec, s2.params, s1, sel.C, data.split, data.priors, ctx.cfg.run.tau, ctx.cfg.run.adjust);
  const auto path = ctx.dir.next("model", "bin");
  sd::save_model(path, model);
  std::cout << "assemble: C=" << sel.C << " -> " << path.string() << '\n';
}

void refine_cmd(const Context& ctx) {
  const auto data = sd::prepare(load_datasets(ctx).train, ctx.cfg.run);
  auto model = sd::load_model(ctx.dir.latest("model", "bin"));
  if (!(model.split == data.split)) throw sd::StructuralError("model split does not match the training data");
  model = sd::refine_decoders(std::move(model), data, ctx.cfg.run.refine);
  const auto path = ctx.dir.next("model", "bin");
  sd::save_model(path, model);
  std::cout << "refine: " << ctx.cfg.run.refine.epochs << " epochs -> " << path.string() << '\n';
}

void eval_cmd(const Context& ctx) {
  const auto test = load_datasets(ctx).test;
  const auto model = sd::load_model(ctx.dir.latest("model", "bin"));
  const auto m = sd::evaluate(model, test);
  const auto path = ctx.dir.next("metrics", "csv");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw sd::MissingArtifactError("cannot write " + path.string());
  out << "overall_accuracy,head_accuracy,tail_accuracy,bce_A,bce_B,samples\n"
      << sd::fmt(m.overall_accuracy) << ',' << sd::fmt(m.head_accuracy) << ',' << sd::fmt(m.tail_accuracy) << ','
      << sd::fmt(m.bce_a) << ',' << sd::fmt(m.bce_b) << ',' << m.samples << '\n';
  std::printf("eval: overall %.4f  head %.4f  tail %.4f  BCE_A %.5f  BCE_B %.5f  (%zu samples)\n",
              m.overall_accuracy, m.head_accuracy, m.tail_accuracy, m.bce_a, m.bce_b, m.samples);
}

void print_proxy_table(const Context& ctx) {
  std::ifstream in(ctx.dir.latest("proxy_grid", "csv"));
  std::string line;
  std::cout << "proxy table:\n";
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') std::cout << "  " << line << '\n';
}

void full_run(const Context& ctx) {
  gen_data(ctx);
  stage1_cmd(ctx);
  search_cmd(ctx);
  stage2_cmd(ctx);
  assemble_cmd(ctx);
  if (ctx.cfg.run.refine_enabled) refine_cmd(ctx);
  eval_cmd(ctx);
  print_proxy_table(ctx);
}

int verify_lemma(const Overrides& o) {
  const auto seed = o.seed.value_or(1);
  const auto t0 = std::chrono::steady_clock::now();
  const auto s = sd::verify_lemma1_random(o.trials, seed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("verify-lemma: %d instances, max |residual| = %.3e (%.2f s)\n", s.trials, s.max_abs_residual, secs);
  if (!(s.max_abs_residual < 1e-10)) {
    std::fprintf(stderr, "error: residual exceeds 1e-10\n");
    return sd::exit_code(sd::ErrorKind::numeric);
  }
  return 0;
}

void oracle_cmd(const Context& ctx) {
  const auto g = sd::make_generator(ctx.cfg.data.gen);
  const auto report =
      sd::grid_compare(g, ctx.cfg.run, ctx.cfg.run.c_candidates(), ctx.cfg.run.grid_w, ctx.cfg.oracle);
  sd::write_oracle_csv(report, ctx.dir.next("oracle_grid", "csv"));
  sd::write_json(ctx.dir.next("oracle_report", "json"), sd::to_json(report));
  std::cout << "oracle: " << report.cells.size() << " cells, " << report.resamples << " resamples, "
            << report.invalid_cells << " invalid\n";
  if (report.spearman_rho)
    std::printf("  spearman rho %.4f\n", *report.spearman_rho);
  else
    std::printf("  spearman rho undefined (constant ranking)\n");
  std::printf("  oracle best C=%d w_A=%.2f, proxy best C=%d w_A=%.2f (oracle rank %.1f of %d)\n",
              report.oracle_best_C, report.oracle_best_w, report.proxy_best_C, report.proxy_best_w,
              report.proxy_best_oracle_rank, report.ranked_cells);
}

void sweep_cmd(const Context& ctx) {
  const auto g = sd::make_generator(ctx.cfg.data.gen);
  const int C = ctx.cfg.sweep_c < 0 ? static_cast<int>(ctx.cfg.run.trunk_widths.size()) : ctx.cfg.sweep_c;
  const auto rows = sd::weight_sweep(g, ctx.cfg.run, C, ctx.cfg.run.grid_w, ctx.cfg.oracle);
  sd::write_sweep_csv(rows, ctx.dir.next("sweep", "csv"));
  std::printf("sweep at C=%d:\n   w_A   accuracy          head    tail    risk\n", C);
  for (const auto& r : rows)
    std::printf("  %.2f  %.4f +- %.4f  %.4f  %.4f  %.4f\n", r.w_a, r.accuracy.mean, r.accuracy.stderr_,
                r.head_accuracy.mean, r.tail_accuracy.mean, r.risk.mean);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shared-depth and task-weight selection for long-tailed classification"};
  app.require_subcommand(1);
  Overrides o;
  app.add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--out", o.out, "run directory")->capture_default_str();
  app.add_option("--seed", o.seed, "data/oracle seed (verify-lemma: instance seed)");
  app.add_option("--jobs", o.jobs, "parallel oracle jobs")->check(CLI::PositiveNumber);
  app.add_option("--grid-c", o.grid_c, "shared-depth candidates, e.g. 0,1,2")->delimiter(',');
  app.add_option("--grid-w", o.grid_w, "w_A candidates, e.g. 0,0.5,1")->delimiter(',');
  app.add_option("--tau", o.tau, "logit adjustment strength");
  app.add_option("--resamples", o.resamples, "oracle resamples M");
  app.add_option("--train-size", o.train_size, "oracle training-set size N");
  app.add_flag("--no-refine", o.no_refine, "skip decoder refinement");

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "generate (or import) the train/test datasets"},
      {"stage1", "train each task alone and estimate its diagonal Fisher"},
      {"search", "evaluate the proxy over the (C, w_A) grid and record the selection"},
      {"stage2", "weighted joint training at the selected w_A"},
      {"assemble", "combine the shared encoder with the Stage-1 decoders"},
      {"refine", "fine-tune the decoders with the encoder frozen"},
      {"eval", "accuracy and task-wise BCE of the latest model on the test set"},
      {"full-run", "gen-data through eval in one go"},
      {"verify-lemma", "check the KL decomposition on random discrete instances"},
      {"oracle", "Monte-Carlo risk over the grid compared with the proxy"},
      {"sweep", "Monte-Carlo accuracy and risk across w_A at fixed C"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->fallthrough();
    if (name == "verify-lemma") sub->add_option("--trials", o.trials, "number of instances")->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return sd::exit_code(sd::ErrorKind::config);
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "verify-lemma") return verify_lemma(o);
    const Context ctx = resolve(o, cmd);
    if (cmd == "gen-data") gen_data(ctx);
    else if (cmd == "stage1") stage1_cmd(ctx);
    else if (cmd == "search") search_cmd(ctx);
    else if (cmd == "stage2") stage2_cmd(ctx);
    else if (cmd == "assemble") assemble_cmd(ctx);
    else if (cmd == "refine") refine_cmd(ctx);
    else if (cmd == "eval") eval_cmd(ctx);
    else if (cmd == "full-run") full_run(ctx);
    else if (cmd == "oracle") oracle_cmd(ctx);
    else if (cmd == "sweep") sweep_cmd(ctx);
    return 0;
  } catch (const sd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return sd::exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return sd::exit_code(sd::ErrorKind::missing_artifact);
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed artifact: " << e.what() << '\n';
    return sd::exit_code(sd::ErrorKind::structural);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
