#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "serpent/serpent.hpp"

namespace fs = std::filesystem;
using namespace serpent;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Flags shared by train / eval / predict that map 1:1 onto config keys.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::pair<std::string, CLI::Option*>> opts;
  std::map<std::string, std::string> values;

  void add(CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& help) {
    opts.emplace_back(key, cmd->add_option(flag, values[key], help));
  }
};

void add_model_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.config_path, "flat key = value config file");
  f.add(cmd, "--model", "model", "tiny|default");
  f.add(cmd, "--conv", "conv", "vanilla|dsconv|enhanced");
  f.add(cmd, "--channel-attention", "channel_attention", "none|cam|wcam");
  f.add(cmd, "--ratio", "ratio", "channel attention reduction ratio");
  f.add(cmd, "--seed", "seed", "run seed");
}

/// Defaults, then the config file, then SERPENT_SEED, then explicit flags.
RunConfig resolve_config(const ConfigFlags& f, const std::string& fallback_file = {}) {
  RunConfig cfg;
  if (!f.config_path.empty()) apply_config_file(cfg, f.config_path);
  else if (!fallback_file.empty() && fs::exists(fallback_file)) apply_config_file(cfg, fallback_file);
  apply_seed_env(cfg);
  for (const auto& [key, opt] : f.opts)
    if (opt->count() > 0) set_config_value(cfg, key, f.values.at(key));
  return cfg;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string sidecar_path(const std::string& checkpoint) { return checkpoint + ".cfg"; }

DSCformer<float> load_model(const RunConfig& cfg, const std::string& checkpoint) {
  DSCformer<float> model(cfg.model_config());
  auto params = model.parameters();
  apply_checkpoint(read_checkpoint(checkpoint), params);
  return model;
}

// Mirror index without repeating the edge; period 2(n-1) handles any pad.
int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

int cmd_generate(int n_train, int n_test, std::uint64_t seed, const std::string& out, const std::string& difficulty, int size) {
  if (n_train < 1 || n_test < 1) throw ConfigError("--train and --test must be positive");
  build_dataset(n_train, n_test, seed, out, parse_difficulty(difficulty), size, size);
  std::cout << (fs::path(out) / kManifestName).string() << '\n';
  return kOk;
}

int cmd_train(const RunConfig& cfg) {
  const auto model_cfg = cfg.model_config();
  std::cout << config_text(cfg) << std::flush;
  const auto manifest = read_manifest(cfg.manifest);
  const auto train = load_split(manifest, manifest.train);
  const auto val = load_split(manifest, manifest.test);

  ensure_parent(cfg.checkpoint);
  ensure_parent(cfg.log);
  {
    std::ofstream side(sidecar_path(cfg.checkpoint), std::ios::trunc);
    if (!side) throw DataError("cannot write " + sidecar_path(cfg.checkpoint));
    side << config_text(cfg);
  }
  std::ofstream log(cfg.log, std::ios::trunc);
  if (!log) throw DataError("cannot write log " + cfg.log);

  DSCformer<float> model(model_cfg);
  const auto result = train_loop(model, train, val, cfg.train_options(), [&](const EpochRecord& r) {
    const auto line = format_record(r);
    log << line << '\n' << std::flush;
    std::cout << line << '\n' << std::flush;
  });
  std::printf("best_val_iou=%.6f\nbest_epoch=%d\n", result.best_iou, result.best_epoch);
  return kOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& manifest_path, const std::string& split,
             const std::string& out_dir) {
  const auto model = load_model(cfg, checkpoint);
  const auto manifest = read_manifest(manifest_path);
  if (split != "test" && split != "train") throw ConfigError("--split must be test|train");
  const auto data = load_split(manifest, split == "test" ? manifest.test : manifest.train);
  if (data.empty()) throw DataError("split '" + split + "' is empty in " + manifest_path);
  const auto report = evaluate(model, data);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream tsv(fs::path(out_dir) / "metrics.tsv"), kv(fs::path(out_dir) / "metrics.txt");
    if (!tsv || !kv) throw DataError("cannot write metrics in " + out_dir);
    write_metrics_tsv(tsv, report);
    write_metrics_kv(kv, report);
  }
  write_metrics_kv(std::cout, report);
  return kOk;
}

int cmd_predict(const RunConfig& cfg, const std::string& checkpoint, const std::string& image_path, const std::string& out) {
  const auto img = load_pgm(image_path);
  const auto model = load_model(cfg, checkpoint);
  constexpr int kMultiple = 32;
  const int H = img.height, W = img.width;
  const int Hp = (H + kMultiple - 1) / kMultiple * kMultiple, Wp = (W + kMultiple - 1) / kMultiple * kMultiple;
  const int top = (Hp - H) / 2, left = (Wp - W) / 2;
  Image padded(Hp, Wp);
  for (int y = 0; y < Hp; ++y)
    for (int x = 0; x < Wp; ++x) padded.at(y, x) = img.at(reflect_index(y - top, H), reflect_index(x - left, W));
  const auto masks = predict_masks(model, {&padded}, 1);
  Image result(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) result.at(y, x) = masks[0].at(y + top, x + left);
  ensure_parent(out);
  save_pgm(out, result);
  return kOk;
}

int cmd_gradcheck(const std::string& scope, bool corrupt) {
  GradCheckOptions opts;
  if (corrupt) opts.analytic_scale = -1.0;
  const auto units = run_gradcheck_suite(parse_gradcheck_scope(scope), opts);
  std::vector<std::string> failed;
  for (const auto& u : units) {
    std::printf("%-24s %.3e %s\n", u.name.c_str(), u.report.max_rel_error, u.report.passed ? "pass" : "FAIL");
    if (!u.report.passed) failed.push_back(u.name + " (" + u.report.failure + ")");
  }
  if (failed.empty()) return kOk;
  std::cerr << "gradcheck failed:";
  for (const auto& f : failed) std::cerr << "\n  " << f;
  std::cerr << '\n';
  return kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"serpent: snake-convolution crack segmentation"};
  app.require_subcommand(1);

  int n_train = 160, n_test = 40, size = 64;
  std::uint64_t gen_seed = 0;
  std::string gen_out, difficulty = "easy";
  auto* gen = app.add_subcommand("generate", "write a synthetic dataset and manifest");
  gen->add_option("--train", n_train, "training pairs");
  gen->add_option("--test", n_test, "test pairs");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--difficulty", difficulty, "easy|hard");
  gen->add_option("--size", size, "image side length");

  ConfigFlags train_flags;
  bool no_augment = false;
  auto* train = app.add_subcommand("train", "train a model on a dataset manifest");
  add_model_flags(train, train_flags);
  train_flags.add(train, "--manifest", "manifest", "dataset manifest");
  train_flags.add(train, "--checkpoint", "checkpoint", "best-IoU checkpoint path");
  train_flags.add(train, "--log", "log", "per-epoch TSV log path");
  train_flags.add(train, "--epochs", "epochs", "epochs");
  train_flags.add(train, "--batch", "batch", "batch size");
  train_flags.add(train, "--lr", "lr", "Adam learning rate");
  train_flags.add(train, "--weight-decay", "weight_decay", "decoupled weight decay");
  train->add_flag("--no-augment", no_augment, "disable augmentation");

  ConfigFlags eval_flags;
  std::string eval_ckpt, eval_manifest, eval_split = "test", eval_out;
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  add_model_flags(eval, eval_flags);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint")->required();
  eval->add_option("--manifest", eval_manifest, "dataset manifest")->required();
  eval->add_option("--split", eval_split, "test|train");
  eval->add_option("--out", eval_out, "directory for metrics.tsv and metrics.txt");

  ConfigFlags pred_flags;
  std::string pred_ckpt, pred_image, pred_out;
  auto* predict = app.add_subcommand("predict", "write a binary crack mask for one image");
  add_model_flags(predict, pred_flags);
  predict->add_option("--checkpoint", pred_ckpt, "checkpoint")->required();
  predict->add_option("--image", pred_image, "input PGM")->required();
  predict->add_option("--out", pred_out, "output mask PGM")->required();

  std::string scope;
  bool corrupt = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("scope", scope, "primitive|dsconv|attention|block|model")->required();
  gc->add_flag("--corrupt-backward", corrupt)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_generate(n_train, n_test, gen_seed, gen_out, difficulty, size);
    if (*train) {
      auto cfg = resolve_config(train_flags);
      if (no_augment) cfg.augment = false;
      return cmd_train(cfg);
    }
    if (*eval) return cmd_eval(resolve_config(eval_flags, sidecar_path(eval_ckpt)), eval_ckpt, eval_manifest, eval_split, eval_out);
    if (*predict) return cmd_predict(resolve_config(pred_flags, sidecar_path(pred_ckpt)), pred_ckpt, pred_image, pred_out);
    if (*gc) return cmd_gradcheck(scope, corrupt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const ContractError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
