#include <cstdint>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spngd/driver.hpp"
#include "spngd/errors.hpp"

namespace {

void print_train_summary(const spngd::RunManifest& m,
                         const spngd::TrainHistory& hist) {
  std::cout << "steps: " << hist.records.size() << '\n';
  if (!hist.records.empty()) {
    const spngd::MetricsRecord& last = hist.records.back();
    std::cout << "final loss: " << spngd::format_double(last.loss) << '\n'
              << "final train accuracy: "
              << spngd::format_double(last.train_acc) << '\n';
    for (auto it = hist.records.rbegin(); it != hist.records.rend(); ++it)
      if (it->has_eval) {
        std::cout << "eval accuracy (epoch "
                  << spngd::format_double(it->epoch)
                  << "): " << spngd::format_double(it->eval_acc) << '\n';
        break;
      }
  }
  std::cout << "artifacts: " << m.output_dir << '\n';
}

void print_report(const spngd::LedgerReport& rep) {
  std::cout << "steps: " << rep.steps << '\n'
            << "total bytes: " << rep.total_bytes << '\n'
            << "statistic bytes: " << rep.stat_bytes << '\n'
            << "gradient bytes: " << rep.grad_bytes << '\n'
            << "parameter bytes: " << rep.param_bytes << '\n'
            << "statistic bytes if refreshed every step: "
            << rep.stat_bytes_every_step << '\n'
            << "statistic reduction rate: "
            << spngd::format_double(rep.reduction_rate) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Natural-gradient trainer with Kronecker-factored curvature, stale "
      "statistics, and a simulated data/model-parallel cluster"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  CLI::App* train = app.add_subcommand("train", "Run a training manifest");
  train->add_option("--config", config_path, "JSON run manifest")->required();
  train->add_option("--override", overrides,
                    "key=value applied to the manifest (repeatable; dotted "
                    "paths and [i] indices reach nested fields)");

  std::string ckpt_path, data_dir;
  std::int64_t eval_batch = 256;
  CLI::App* eval =
      app.add_subcommand("eval", "Evaluate a checkpoint on a saved dataset");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint.bin path")
      ->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--batch", eval_batch, "evaluation batch size");

  std::string ledger_path;
  CLI::App* report =
      app.add_subcommand("report", "Summarize a communication ledger CSV");
  report->add_option("--ledger", ledger_path, "ledger.csv path")->required();

  CLI::App* presets =
      app.add_subcommand("presets", "List the built-in training presets");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const spngd::RunManifest m =
          spngd::load_manifest(config_path, overrides);
      const spngd::TrainHistory hist = spngd::train_to_files(m);
      print_train_summary(m, hist);
    } else if (eval->parsed()) {
      const auto [net, params] = spngd::load_checkpoint(ckpt_path);
      const spngd::Dataset ds = spngd::load_dataset(data_dir);
      const double acc =
          spngd::evaluate(net, params, ds, static_cast<spngd::Index>(eval_batch));
      std::cout << "accuracy: " << spngd::format_double(acc) << " over "
                << ds.size() << " samples\n";
    } else if (report->parsed()) {
      std::ifstream is(ledger_path);
      if (!is) throw spngd::Error("cannot open " + ledger_path);
      print_report(spngd::ledger_report(spngd::read_ledger_csv(is)));
    } else if (presets->parsed()) {
      std::cout << "name      bs     mixup  p    e_start e_end  eta0     "
                   "m0     lambda   epochs\n";
      for (const std::string& name : spngd::preset_names()) {
        const spngd::TrainConfig p = spngd::preset(name);
        char line[160];
        std::snprintf(line, sizeof line,
                      "%-8s %6lld  %.2f  %4.1f  %5.1f  %5.1f  %.2e %.3f  "
                      "%.2e %5.1f\n",
                      name.c_str(), static_cast<long long>(p.bs),
                      p.alpha_mixup, p.p_decay, p.e_start, p.e_end, p.eta0,
                      p.m0, p.lambda, p.epochs);
        std::cout << line;
      }
    }
  } catch (const spngd::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const spngd::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const spngd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
