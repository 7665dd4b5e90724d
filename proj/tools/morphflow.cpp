// morphflow command-line interface.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"

#include "morphflow/error.hpp"
#include "morphflow/parallel.hpp"
#include "morphflow/pipeline.hpp"

namespace fs = std::filesystem;
using namespace morphflow;

namespace {

struct CommonOptions {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  bool aux = false;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
  app->add_option("--preset", o.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  app->add_option("--seed", o.seed, "random seed");
  app->add_flag("--aux", o.aux, "enable the ROI auxiliary loss");
}

pipeline::TrainConfig resolve_config(const CommonOptions& o) {
  std::string text;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw Error(ErrorCode::IOError, "cannot open config " + o.config);
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  if (!o.preset.empty()) text += "\npreset = " + o.preset + "\n";
  auto cfg = pipeline::TrainConfig::parse(text);
  if (o.seed) cfg.seed = *o.seed;
  if (o.aux) cfg.weights.aux_enabled = true;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  configure_threads_from_env();
  CLI::App app{"morphflow: two-stage face/bone point cloud transformation"};
  app.require_subcommand(1);

  // synth
  CommonOptions synth_common;
  std::string synth_out;
  std::size_t synth_pairs = 80, synth_test = 16;
  std::optional<std::size_t> synth_points;
  auto* synth = app.add_subcommand("synth", "generate synthetic face/bone pairs");
  add_common(synth, synth_common);
  synth->add_option("--out-dir", synth_out, "output directory (train/ and test/ inside)")->required();
  synth->add_option("--pairs", synth_pairs, "number of pairs");
  synth->add_option("--test-pairs", synth_test, "pairs held out into test/");
  synth->add_option("--points", synth_points, "points per cloud (default: config n_points)");

  // preprocess
  CommonOptions pre_common;
  std::vector<std::string> pre_inputs;
  std::string pre_out;
  auto* pre = app.add_subcommand("preprocess", "filter, normalize and resample raw clouds");
  add_common(pre, pre_common);
  pre->add_option("inputs", pre_inputs, "input clouds (.ply, .xyz, .csv)")->required()->check(CLI::ExistingFile);
  pre->add_option("--out-dir", pre_out, "output directory")->required();

  // train
  CommonOptions train_common;
  std::string train_data, train_out;
  std::optional<std::size_t> train_epochs;
  auto* train = app.add_subcommand("train", "train the bidirectional model");
  add_common(train, train_common);
  train->add_option("data", train_data, "directory of <id>_face.ply / <id>_bone.ply pairs")->required();
  train->add_option("--out-dir", train_out, "checkpoint directory")->required();
  train->add_option("--epochs", train_epochs, "override the epoch count");

  // infer
  std::string infer_ckpt, infer_input, infer_out, infer_direction = "face2bone", infer_prov;
  std::uint64_t infer_seed = 0;
  bool infer_coarse = false;
  auto* infer = app.add_subcommand("infer", "predict the paired shape from one cloud");
  infer->add_option("checkpoint", infer_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  infer->add_option("input", infer_input, "input cloud")->required()->check(CLI::ExistingFile);
  infer->add_option("--direction", infer_direction, "face2bone or bone2face")
      ->check(CLI::IsMember({"face2bone", "bone2face"}));
  infer->add_option("--out", infer_out, "output cloud path")->required();
  infer->add_option("--provenance", infer_prov, "preprocessing record for de-normalization")->check(CLI::ExistingFile);
  infer->add_option("--seed", infer_seed, "noise seed");
  infer->add_flag("--emit-coarse", infer_coarse, "also write the coarse prediction");

  // eval
  std::string eval_ckpt, eval_data, eval_compare, eval_out;
  bool eval_rois = false, eval_no_emd = false;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on paired data");
  eval->add_option("checkpoint", eval_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("data", eval_data, "directory of pairs")->required();
  eval->add_option("--compare", eval_compare, "second checkpoint for rank-sum p-values")->check(CLI::ExistingFile);
  eval->add_flag("--rois", eval_rois, "add ROI-restricted rows from <id>_roi.json");
  eval->add_flag("--no-emd", eval_no_emd, "skip EMD");
  eval->add_option("--out-dir", eval_out, "write metrics.csv here");

  // gradcheck
  std::uint64_t gc_seed = 1;
  std::size_t gc_points = 32, gc_entries = 8;
  bool gc_no_aux = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full loss");
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_option("--points", gc_points, "points per cloud");
  gc->add_option("--entries", gc_entries, "entries per parameter tensor (0 = all)");
  gc->add_flag("--no-aux", gc_no_aux, "leave the ROI term out");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      const auto cfg = resolve_config(synth_common);
      if (synth_test > synth_pairs) throw Error(ErrorCode::InvalidArgument, "--test-pairs exceeds --pairs");
      auto pairs = pipeline::synth_generate(cfg.seed, synth_points.value_or(cfg.n_points), synth_pairs);
      const std::size_t n_train = synth_pairs - synth_test;
      std::vector<pipeline::SyntheticPair> tr(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(n_train));
      std::vector<pipeline::SyntheticPair> te(pairs.begin() + static_cast<std::ptrdiff_t>(n_train), pairs.end());
      pipeline::write_pairs(tr, fs::path(synth_out) / "train");
      if (!te.empty()) pipeline::write_pairs(te, fs::path(synth_out) / "test");
      std::cout << "wrote " << tr.size() << " train and " << te.size() << " test pairs to " << synth_out << "\n";
    } else if (*pre) {
      const auto cfg = resolve_config(pre_common);
      std::vector<fs::path> inputs(pre_inputs.begin(), pre_inputs.end());
      const auto results = pipeline::preprocess_run(inputs, pre_out, cfg);
      for (const auto& r : results) {
        std::cout << r.provenance.source << ": " << r.provenance.input_points << " -> " << r.provenance.after_outliers
                  << " -> " << r.provenance.after_dbscan << " -> " << r.provenance.output_points << " points\n";
      }
    } else if (*train) {
      auto cfg = resolve_config(train_common);
      if (train_epochs) cfg.epochs = *train_epochs;
      const auto data = pipeline::read_pairs(train_data);
      pipeline::BidirModel model(cfg);
      fs::create_directories(train_out);
      std::ofstream curve(fs::path(train_out) / "loss_curve.csv");
      curve << "epoch,step,lr,loss\n" << std::setprecision(17);
      pipeline::TrainOptions opt;
      opt.out_dir = fs::path(train_out);
      opt.on_step = [&curve](const pipeline::StepRecord& r) {
        curve << r.epoch << ',' << r.step << ',' << r.lr << ',' << r.loss << '\n';
      };
      opt.on_epoch = [](std::size_t e, double loss) {
        std::cout << "epoch " << e + 1 << " mean loss " << loss << std::endl;
      };
      const auto result = pipeline::train_run(model, data, opt);
      std::ofstream(fs::path(train_out) / "config.txt") << cfg.to_text();
      std::cout << "digest " << result.digest << "\n";
    } else if (*infer) {
      std::optional<fs::path> prov;
      if (!infer_prov.empty()) prov = infer_prov;
      pipeline::infer_run(infer_ckpt, infer_input, pipeline::parse_direction(infer_direction), infer_out, infer_coarse,
                          prov, infer_seed);
      std::cout << "wrote " << infer_out << "\n";
    } else if (*eval) {
      const auto model = pipeline::load_checkpoint(eval_ckpt);
      const auto data = pipeline::read_pairs(eval_data);
      pipeline::EvalOptions opt;
      opt.with_rois = eval_rois;
      opt.emd = !eval_no_emd;
      const auto report = pipeline::evaluate_run(*model, data, opt);
      report.write_table(std::cout);
      if (!eval_out.empty()) {
        fs::create_directories(eval_out);
        std::ofstream csv(fs::path(eval_out) / "metrics.csv");
        report.write_csv(csv);
      }
      if (!eval_compare.empty()) {
        const auto other = pipeline::load_checkpoint(eval_compare);
        const auto report_b = pipeline::evaluate_run(*other, data, opt);
        std::cout << "rank-sum p-values (" << eval_ckpt << " vs " << eval_compare << ")\n";
        for (const auto& [metric, p] : pipeline::compare_reports(report, report_b)) {
          std::cout << "  " << metric << " p=" << p << "\n";
        }
      }
    } else if (*gc) {
      const auto r = pipeline::gradcheck_loss(gc_seed, gc_points, !gc_no_aux, gc_entries);
      std::cout << "entries " << r.entries_checked << " refined " << r.refined << " max_rel_error " << r.max_rel_error
                << " worst " << r.worst_param << "[" << r.worst_entry << "]\n";
      return r.max_rel_error < 1e-4 ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
