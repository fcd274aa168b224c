// Command-line driver: train, eval, viz, gen-toy.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "conjflow/conjflow.hpp"

namespace fs = std::filesystem;
using namespace conjflow;
using Real = float;

namespace {

std::string frame_name(std::int64_t t, const char* suffix) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%06lld_%s.png", static_cast<long long>(t), suffix);
  return buf;
}

int cmd_train(const fs::path& config_path, const std::optional<fs::path>& resume, const std::optional<std::uint64_t>& seed) {
  Config cfg = load_config(config_path);
  if (seed) {
    cfg.trainer.seed = *seed;
    cfg.model.seed = *seed;
  }
  validate(cfg);
  const fs::path out = cfg.trainer.out_dir;
  fs::create_directories(out);
  {
    std::ofstream os(out / "config.ini");
    os << to_ini(cfg);
  }
  std::ofstream metrics(out / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);

  StreamHandle stream = open_stream(cfg.stream);
  RunOptions<Real> ro;
  ro.resume = resume;
  ro.metrics = &metrics;
  ro.checkpoint_dir = out;
  TemplateMemory memory;
  std::optional<ProtocolPlan> plan;
  if (cfg.eval.train_laps > 0) {
    plan = plan_protocol(cfg, stream);
    ro.on_step = template_hook<Real>(stream, plan->points, memory, nullptr);
    if (cfg.trainer.max_steps == 0) ro.max_steps = plan->train_end - 1 + (cfg.trainer.bootstrap_pair ? 1 : 0);
  }
  const RunResult<Real> r = run<Real>(cfg, ro);
  Checkpoint ck = to_checkpoint(r.state, cfg);
  if (plan) ck.put_blob("templates", memory.to_json().dump());
  const fs::path final_path = out / "final.ckpt";
  ck.save(final_path);
  std::cout << "steps " << r.steps << ", diverged " << r.diverged << ", checkpoint " << final_path.string() << "\n";
  if (plan && memory.size() != plan->points.size())
    std::cerr << "warning: collected " << memory.size() << " of " << plan->points.size()
              << " templates (resumed past some template frames?)\n";
  return 0;
}

int cmd_eval(const fs::path& config_path, const fs::path& ckpt_path, const fs::path& out) {
  const Config cfg = load_config(config_path);
  validate(cfg);
  const Checkpoint ck = Checkpoint::load(ckpt_path, config_hash(cfg));
  const TrainState<Real> s = from_checkpoint<Real>(ck, cfg);
  if (!ck.has_blob("templates")) throw std::runtime_error("checkpoint has no template memory; train with eval.train_laps > 0");
  const TemplateMemory memory = TemplateMemory::from_json(nlohmann::json::parse(ck.get_blob("templates")));
  StreamHandle stream = open_stream(cfg.stream);
  const ProtocolPlan plan = plan_protocol(cfg, stream);
  fs::create_directories(out);
  EvalOptions opt;
  opt.per_frame = true;
  if (cfg.eval.render) {
    opt.render_dir = out / "renders";
    fs::create_directories(*opt.render_dir);
  }
  const MetricsReport rep = evaluate_lap(s.model, stream, plan.eval_begin, plan.eval_end, memory, cfg.eval.tau_abstain, opt);
  std::ofstream os(out / "metrics.jsonl");
  for (const auto& rec : rep.per_frame) os << rec.dump() << "\n";
  nlohmann::json agg = rep.to_json();
  agg.erase("per_frame");
  agg["aggregate"] = true;
  os << agg.dump() << "\n";
  std::cout << "macro F1 " << rep.macro_f1 << " over " << rep.frames << " frames";
  if (rep.epe) std::cout << ", EPE " << *rep.epe;
  std::cout << "\n";
  return 0;
}

int cmd_viz(const fs::path& ckpt_path, const fs::path& stream_path, const fs::path& out, std::int64_t max_frames) {
  const Checkpoint ck = Checkpoint::load(ckpt_path);
  const Config cfg = parse_config(ck.get_blob("config"));
  const TrainState<Real> s = from_checkpoint<Real>(ck, cfg);
  StreamSpec spec;
  if (fs::is_directory(stream_path)) {
    spec = cfg.stream;
    spec.source = SourceKind::Directory;
    spec.path = stream_path;
    spec.frames = 0;
  } else {
    spec = load_config(stream_path).stream;
  }
  StreamHandle stream = open_stream(spec);
  std::optional<TemplateMemory> memory;
  if (ck.has_blob("templates")) memory = TemplateMemory::from_json(nlohmann::json::parse(ck.get_blob("templates")));
  fs::create_directories(out);
  const std::int64_t n = max_frames > 0 ? std::min(max_frames, stream.length()) : stream.length();
  for (std::int64_t t = 0; t < n; ++t) {
    const Tensor<Real> frame = stream.frame_at(t).cast<Real>();
    const auto feats = extract_features(s.model, frame);
    for (int l = 1; l <= s.model.levels(); ++l)
      write_png(out / frame_name(t, ("feat" + std::to_string(l)).c_str()), render_features(feats[l]));
    if (t >= 1) {
      const auto a = forward_pair(s.model, stream.frame_at(t - 1).cast<Real>(), frame, false);
      for (int l = 1; l <= s.model.levels(); ++l)
        write_png(out / frame_name(t, ("flow" + std::to_string(l)).c_str()), render_flow(a.flows[l - 1]));
    }
    if (memory && !memory->empty())
      write_png(out / frame_name(t, "pred"),
                render_prediction(classify_frame(level_pointers(feats), *memory, cfg.eval.tau_abstain), frame));
  }
  std::cout << "wrote " << n << " frames to " << out.string() << "\n";
  return 0;
}

int cmd_gen_toy(const fs::path& spec_path, const fs::path& out) {
  const Config cfg = load_config(spec_path);
  const GenerateSummary g = generate_toy_stream(cfg.stream, out);
  std::cout << "wrote " << g.frames << " frames to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Motion-conjugated feature learning on video streams"};
  app.require_subcommand(1);

  fs::path config, ckpt, out, stream_path, spec;
  std::optional<fs::path> resume;
  std::optional<std::uint64_t> seed;
  std::int64_t max_frames = 0;

  auto* train = app.add_subcommand("train", "Train online over the configured stream");
  train->add_option("--config", config, "INI configuration")->required()->check(CLI::ExistingFile);
  train->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "Override trainer and model seeds");

  auto* eval = app.add_subcommand("eval", "Classify the evaluation laps with the stored templates");
  eval->add_option("--config", config, "INI configuration")->required()->check(CLI::ExistingFile);
  eval->add_option("--ckpt", ckpt, "Checkpoint with templates")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out, "Output directory")->required();

  auto* viz = app.add_subcommand("viz", "Render flows, features and predictions");
  viz->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  viz->add_option("--stream", stream_path, "Frame directory or configuration file")->required()->check(CLI::ExistingPath);
  viz->add_option("--out", out, "Output directory")->required();
  viz->add_option("--frames", max_frames, "Render at most this many frames (0: all)");

  auto* gen = app.add_subcommand("gen-toy", "Write a synthetic stream with labels and flow");
  gen->add_option("--spec", spec, "Configuration whose [stream] section describes the stream")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config, resume, seed);
    if (*eval) return cmd_eval(config, ckpt, out);
    if (*viz) return cmd_viz(ckpt, stream_path, out, max_frames);
    if (*gen) return cmd_gen_toy(spec, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
