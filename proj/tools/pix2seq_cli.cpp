#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pix2seq/pix2seq.hpp"

namespace fs = std::filesystem;
using namespace pix2seq;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string out;
};

void add_config_options(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "INI run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "Override a config value, e.g. train.epochs=5 (repeatable)");
}

RunConfig build_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  return cfg;
}

struct DecodeFlags {
  std::optional<double> p;
  std::optional<double> eos_offset;
  std::optional<bool> fixed_length;
  std::optional<std::string> mode;
  std::optional<int> max_objects;
};

void add_decode_options(CLI::App* cmd, DecodeFlags& d) {
  cmd->add_option("--p", d.p, "Nucleus mass (0 = argmax)")->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--eos-offset", d.eos_offset, "Added to the EOS logit before the softmax (-inf disables EOS)");
  cmd->add_option("--fixed-length", d.fixed_length, "Decode exactly 5 * max_objects tokens with EOS masked");
  cmd->add_option("--mode", d.mode, "argmax or nucleus");
  cmd->add_option("--max-objects", d.max_objects, "Decoding cap in objects");
}

DecodeConfig apply_decode_flags(DecodeConfig dc, const DecodeFlags& d, const std::optional<std::uint64_t>& seed) {
  if (d.p) dc.p = *d.p;
  if (d.eos_offset) dc.eos_offset = *d.eos_offset;
  if (d.fixed_length) dc.fixed_length = *d.fixed_length;
  if (d.mode) dc.mode = parse_decode_mode(*d.mode);
  if (d.max_objects) dc.max_objects = *d.max_objects;
  if (seed) dc.seed = *seed;
  validate(dc);
  return dc;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

template <class F>
void write_file(const fs::path& p, F&& write) {
  auto os = open_out(p);
  write(os);
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if constexpr (std::is_same_v<T, double>)
      out.push_back(detail::parse_double(what, item));
    else
      out.push_back(static_cast<T>(detail::parse_integer(what, item)));
  }
  if (out.empty()) throw std::invalid_argument(std::string(what) + ": empty list");
  return out;
}

// Validation samples, or a single image file when given.
std::vector<Sample> inference_inputs(const RunConfig& cfg, const std::string& image_path, int samples) {
  if (!image_path.empty()) {
    Sample s;
    s.image = read_pnm(image_path);
    s.height = s.image.height;
    s.width = s.image.width;
    return {s};
  }
  SyntheticConfig dc = cfg.data;
  const int n = samples >= 0 ? samples : dc.val_size;
  return synthetic_split(dc, Split::val, n);
}

int cmd_train(const Common& c, std::optional<long> max_steps, std::optional<long> stop_after) {
  std::optional<Trainer> trainer;
  if (!c.checkpoint.empty()) {
    auto ck = load_checkpoint<float>(c.checkpoint);
    if (!c.overrides.empty() || !c.config_path.empty()) {
      // allow extending a run, never changing the model
      RunConfig cfg = c.config_path.empty() ? ck.config : load_config(c.config_path, ck.config);
      for (const auto& o : c.overrides) apply_override(cfg, o);
      if (!(cfg.model == ck.config.model) || cfg.n_bins != ck.config.n_bins)
        throw ConfigError("resumed run must keep the checkpoint's model configuration");
      ck.config = cfg;
    }
    if (max_steps) ck.config.train.max_steps = static_cast<int>(*max_steps);
    trainer.emplace(ck);
  } else {
    RunConfig cfg = build_config(c);
    if (c.seed) cfg.train.seed = *c.seed;
    if (max_steps) cfg.train.max_steps = static_cast<int>(*max_steps);
    trainer.emplace(cfg);
  }
  const std::string out = c.out.empty() ? "run" : c.out;
  fs::create_directories(out);
  open_out(fs::path(out) / "config.ini") << write_config(trainer->config());
  std::cout << "training: " << trainer->total_steps() << " steps (" << trainer->steps_per_epoch()
            << " per epoch), starting at step " << trainer->step() << '\n';
  run_training(*trainer, {out, &std::cout, stop_after.value_or(-1)});
  std::cout << "checkpoint: " << (fs::path(out) / "checkpoint.bin").string() << '\n';
  return 0;
}

int cmd_eval(const Common& c, const DecodeFlags& d, const std::string& detections_path, int samples) {
  EvalResult result;
  std::string out = c.out.empty() ? "eval" : c.out;
  if (!detections_path.empty()) {
    // score an existing detection file against the configured validation split
    const RunConfig cfg = c.checkpoint.empty() ? build_config(c) : load_checkpoint<float>(c.checkpoint).config;
    std::ifstream in(detections_path);
    if (!in) throw std::runtime_error("cannot open " + detections_path);
    const auto dets = group_by_image(read_detection_lines(in));
    std::vector<EvalImage> gts;
    for (const auto& s : inference_inputs(cfg, "", samples)) gts.push_back(to_eval_image(s));
    result = average_precision(gts, dets);
  } else {
    if (c.checkpoint.empty()) throw std::invalid_argument("eval needs --checkpoint or --detections");
    const auto ck = load_checkpoint<float>(c.checkpoint);
    const Model<float> model(ck.config.model, ck.params);
    const DecodeConfig dc = apply_decode_flags(ck.config.decode, d, c.seed);
    const auto ev = evaluate_model(model, ck.config.vocabulary(), inference_inputs(ck.config, "", samples), dc);
    result = ev.metrics;
    auto os = open_out(fs::path(out) / "detections.txt");
    for (const auto& [id, dets] : ev.detections) write_detection_lines(os, id, dets);
  }
  write_metrics_text(std::cout, result);
  write_file(fs::path(out) / "metrics.txt", [&](std::ostream& os) { write_metrics_text(os, result); });
  open_out(fs::path(out) / "metrics.json") << metrics_json(result).dump(2) << '\n';
  return 0;
}

int cmd_infer(const Common& c, const DecodeFlags& d, const std::string& image_path, int samples) {
  if (c.checkpoint.empty()) throw std::invalid_argument("infer needs --checkpoint");
  const auto ck = load_checkpoint<float>(c.checkpoint);
  const Model<float> model(ck.config.model, ck.params);
  const DecodeConfig dc = apply_decode_flags(ck.config.decode, d, c.seed);
  const Vocabulary vocab = ck.config.vocabulary();
  std::optional<std::ofstream> file;
  if (!c.out.empty()) file = open_out(c.out);
  std::ostream& os = file ? *file : std::cout;
  for (const auto& s : inference_inputs(ck.config, image_path, samples)) {
    Rng rng = Rng::stream(dc.seed, static_cast<std::uint64_t>(s.image_id));
    write_detection_lines(os, s.image_id, detect(model, model_input(s.image, ck.config.model.image_size), vocab, dc, rng));
  }
  return 0;
}

std::vector<std::uint64_t> seed_list(const std::string& seeds, const std::optional<std::uint64_t>& seed) {
  if (!seeds.empty()) return parse_list<std::uint64_t>(seeds, "--seeds");
  return {seed.value_or(0)};
}

int cmd_ablate_ordering(const Common& c, const std::vector<std::string>& strategies, const std::string& seeds) {
  const RunConfig cfg = build_config(c);
  std::vector<OrderingStrategy> list;
  if (strategies.empty() || (strategies.size() == 1 && strategies[0] == "all"))
    list.assign(std::begin(kAllOrderings), std::end(kAllOrderings));
  else
    for (const auto& s : strategies) list.push_back(parse_ordering(s));
  const auto rows = run_ablation_ordering(cfg, list, seed_list(seeds, c.seed), &std::cerr);
  const fs::path out = c.out.empty() ? "ablate_ordering" : c.out;
  write_ablation_table(std::cout, "strategy", rows, false);
  write_file(out / "ordering.csv", [&](std::ostream& os) { write_ablation_table(os, "strategy", rows, false); });
  // one point per strategy: mean over seeds of (AR@100, AP)
  std::vector<PlotSeries> series;
  for (auto s : list) {
    PlotSeries p{std::string(to_string(s)), {0}, {0}};
    int n = 0;
    for (const auto& r : rows)
      if (r.label == to_string(s)) p.x[0] += r.metrics.AR_at_100.value_or(0), p.y[0] += r.metrics.AP.value_or(0), ++n;
    p.x[0] /= n;
    p.y[0] /= n;
    series.push_back(p);
  }
  write_file(out / "ordering.svg", [&](std::ostream& os) { write_svg_plot(os, "Object ordering", "AR@100", "AP", series); });
  return 0;
}

int cmd_ablate_seqaug(const Common& c, const std::string& offsets, const std::string& seeds, bool fixed_for_aug) {
  const RunConfig cfg = build_config(c);
  const auto offs = parse_list<double>(offsets, "--offsets");
  const auto rows = run_ablation_seqaug(cfg, offs, seed_list(seeds, c.seed), fixed_for_aug, &std::cerr);
  const fs::path out = c.out.empty() ? "ablate_seqaug" : c.out;
  write_ablation_table(std::cout, "sequence_augmentation", rows, true);
  write_file(out / "seqaug.csv", [&](std::ostream& os) { write_ablation_table(os, "sequence_augmentation", rows, true); });
  std::vector<PlotSeries> series;
  for (const char* label : {"with", "without"}) {
    for (auto seed : seed_list(seeds, c.seed)) {
      PlotSeries p{std::string(label) + " seq-aug, seed " + std::to_string(seed), {}, {}};
      for (const auto& r : rows)
        if (r.label == label && r.seed == seed) {
          p.x.push_back(r.metrics.AR_at_100.value_or(0));
          p.y.push_back(r.metrics.AP.value_or(0));
        }
      series.push_back(p);
    }
  }
  write_file(out / "seqaug.svg", [&](std::ostream& os) { write_svg_plot(os, "Sequence augmentation, EOS offset sweep", "AR@100", "AP",
                 series); });
  return 0;
}

int cmd_quantization_figure(const Common& c, const std::string& bins, int canvas) {
  RunConfig cfg = build_config(c);
  cfg.data.canvas_size = canvas;
  if (c.seed) cfg.data.seed = *c.seed;
  const Sample s = synthetic_sample(cfg.data, Split::val, 0);
  const fs::path out = c.out.empty() ? "quantization" : c.out;
  auto summary = open_out(out / "quantization.txt");
  summary << "n_bins max_corner_displacement_px file\n";
  for (const auto& p : quantization_figure(s, parse_list<int>(bins, "--bins"))) {
    const std::string name = "quantization_bins" + std::to_string(p.n_bins) + ".ppm";
    fs::create_directories(out);
    write_pnm((out / name).string(), p.image);
    std::ostringstream line;
    line << p.n_bins << ' ' << std::fixed << std::setprecision(6) << p.max_displacement_px << ' ' << name << '\n';
    summary << line.str();
    std::cout << line.str();
  }
  return 0;
}

int cmd_dump_attention(const Common& c, const DecodeFlags& d, int grid, bool shuffle, const std::string& image_path,
                       int sample_index) {
  if (c.checkpoint.empty()) throw std::invalid_argument("dump-attention needs --checkpoint");
  const auto ck = load_checkpoint<float>(c.checkpoint);
  const Model<float> model(ck.config.model, ck.params);
  Image image;
  if (!image_path.empty())
    image = read_pnm(image_path);
  else
    image = synthetic_sample(ck.config.data, Split::val, static_cast<std::uint64_t>(sample_index)).image;
  image = model_input(image, ck.config.model.image_size);
  const fs::path out = c.out.empty() ? "attention" : c.out;
  fs::create_directories(out);
  std::vector<AttentionGrid> grids;
  if (grid > 0) {
    if (shuffle) {
      Rng rng(c.seed.value_or(0));
      image = shuffle_pixels(image, rng);
    }
    grids = attention_region_mode(model, image, ck.config.vocabulary(), grid);
  } else {
    const DecodeConfig dc = apply_decode_flags(ck.config.decode, d, c.seed);
    Rng rng = Rng::stream(dc.seed, static_cast<std::uint64_t>(sample_index));
    grids = attention_decode_mode(model, image, dc, rng);
  }
  write_file(out / "attention.txt", [&](std::ostream& os) { write_attention_grids(os, grids); });
  write_pnm((out / "input.ppm").string(), image);
  for (std::size_t i = 0; i < grids.size(); ++i) {
    // decode mode: one overlay per object, taken at its class slot
    if (grid == 0 && i % 5 != 4) continue;
    write_pnm((out / ("overlay_" + std::to_string(i) + ".ppm")).string(), attention_overlay(image, grids[i]));
  }
  std::cout << "grids=" << grids.size() << " file=" << (out / "attention.txt").string() << '\n';
  return 0;
}

int cmd_embed_sim(const Common& c) {
  if (c.checkpoint.empty()) throw std::invalid_argument("embed-sim needs --checkpoint");
  const auto ck = load_checkpoint<float>(c.checkpoint);
  const Model<float> model(ck.config.model, ck.params);
  const auto sim = coordinate_similarity(model, ck.config.vocabulary());
  const fs::path out = c.out.empty() ? "embed_sim" : c.out;
  write_file(out / "similarity.txt", [&](std::ostream& os) { write_matrix(os, sim); });
  write_pnm((out / "similarity.pgm").string(), similarity_heatmap(sim));
  const auto s = summarize_similarity(sim);
  std::cout << std::fixed << std::setprecision(6) << "near_mean=" << s.near_mean << " near_pairs=" << s.near_pairs
            << " far_mean=" << s.far_mean << " far_pairs=" << s.far_pairs << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pix2seq: object detection as sequence generation"};
  app.require_subcommand(1);
  Common common;
  DecodeFlags decode;
  auto add_common = [&](CLI::App* cmd) {
    add_config_options(cmd, common);
    cmd->add_option("--seed", common.seed, "Random seed");
    cmd->add_option("--out", common.out, "Output directory (or file for infer)");
  };

  auto* train = app.add_subcommand("train", "Train a model on the synthetic shapes dataset");
  add_common(train);
  train->add_option("--checkpoint", common.checkpoint, "Resume from this checkpoint");
  std::optional<long> max_steps, stop_after;
  train->add_option("--max-steps", max_steps, "Cap the total number of optimizer steps");
  train->add_option("--stop-after", stop_after, "Stop after this many steps in this invocation");

  auto* eval = app.add_subcommand("eval", "Decode the validation split and report COCO-style metrics");
  add_common(eval);
  add_decode_options(eval, decode);
  eval->add_option("--checkpoint", common.checkpoint, "Model checkpoint");
  std::string detections_path;
  int samples = -1;
  eval->add_option("--detections", detections_path, "Score this detection file instead of running the model");
  eval->add_option("--samples", samples, "Validation samples to use (default: all)");

  auto* infer = app.add_subcommand("infer", "Emit detections as text lines");
  add_common(infer);
  add_decode_options(infer, decode);
  infer->add_option("--checkpoint", common.checkpoint, "Model checkpoint");
  std::string image_path;
  infer->add_option("--image", image_path, "PPM/PGM image (default: validation samples)");
  infer->add_option("--samples", samples, "Validation samples to decode (default: all)");

  auto* ordering = app.add_subcommand("ablate-ordering", "Train per ordering strategy and seed; tabulate AP and AR@100");
  add_common(ordering);
  std::vector<std::string> strategies;
  std::string seeds;
  ordering->add_option("--strategy", strategies, "Ordering strategy (repeatable; 'all' for every strategy)");
  ordering->add_option("--seeds", seeds, "Comma-separated seeds (default: --seed or 0)");

  auto* seqaug = app.add_subcommand("ablate-seqaug", "Compare training with and without sequence augmentation");
  add_common(seqaug);
  std::string offsets = "0";
  bool fixed_for_aug = true;
  seqaug->add_option("--offsets", offsets, "Comma-separated EOS offsets to sweep");
  seqaug->add_option("--eos-offset", offsets, "Alias of --offsets");
  seqaug->add_option("--seeds", seeds, "Comma-separated seeds (default: --seed or 0)");
  seqaug->add_option("--fixed-length", fixed_for_aug, "Fixed-length decoding for the augmented model");

  auto* quant = app.add_subcommand("quantization-figure", "Redraw boxes after quantization at several bin counts");
  add_common(quant);
  std::string bins = "10,50,100,500";
  int canvas = 480;
  quant->add_option("--bins", bins, "Comma-separated bin counts");
  quant->add_option("--canvas", canvas, "Side of the rendered sample in pixels");

  auto* attn = app.add_subcommand("dump-attention", "Dump decoder cross-attention grids");
  add_common(attn);
  add_decode_options(attn, decode);
  attn->add_option("--checkpoint", common.checkpoint, "Model checkpoint");
  int grid = 0;
  bool shuffle = true;
  int sample_index = 0;
  attn->add_option("--grid", grid, "Region-grid mode with N x N regions (0: decode mode)");
  attn->add_option("--shuffle-pixels", shuffle, "Shuffle pixels in region-grid mode");
  attn->add_option("--image", image_path, "PPM/PGM image (default: a validation sample)");
  attn->add_option("--sample", sample_index, "Validation sample index");

  auto* embed = app.add_subcommand("embed-sim", "Cosine similarity of coordinate-token embeddings");
  add_common(embed);
  embed->add_option("--checkpoint", common.checkpoint, "Model checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*train) return cmd_train(common, max_steps, stop_after);
    if (*eval) return cmd_eval(common, decode, detections_path, samples);
    if (*infer) return cmd_infer(common, decode, image_path, samples);
    if (*ordering) return cmd_ablate_ordering(common, strategies, seeds);
    if (*seqaug) return cmd_ablate_seqaug(common, offsets, seeds, fixed_for_aug);
    if (*quant) return cmd_quantization_figure(common, bins, canvas);
    if (*attn) return cmd_dump_attention(common, decode, grid, shuffle, image_path, sample_index);
    if (*embed) return cmd_embed_sim(common);
  } catch (const std::exception& e) {
    std::cerr << "pix2seq: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
