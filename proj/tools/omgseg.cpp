#include <CLI11.hpp>

#include "omgseg/checkpoint.hpp"
#include "omgseg/io.hpp"
#include "omgseg/pipeline.hpp"
#include "omgseg/rng.hpp"
#include "omgseg/service.hpp"

#include <httplib.h>

#include <csignal>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace omgseg;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
};

RunConfig load_config(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) override_seed(rc, *c.seed);
  validate(rc);
  return rc;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a64(bytes));
}

/// Lists every file under `out` (except the manifest itself).
void write_manifest(const fs::path& out, const std::string& command, const RunConfig& rc, json extra = json::object()) {
  json files = json::array();
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(out))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths)
    files.push_back({{"path", fs::relative(p, out).generic_string()}, {"bytes", fs::file_size(p)}, {"fnv1a64", file_hash(p)}});
  extra["command"] = command;
  extra["config"] = rc;
  extra["files"] = files;
  io::write_json(out / "manifest.json", extra);
}

std::vector<std::vector<SampleRecord>> load_train_data(const RunConfig& rc, const fs::path& data) {
  std::vector<std::vector<SampleRecord>> out;
  for (const auto& s : rc.sources) out.push_back(s.split == "train" ? load_source(data, s) : std::vector<SampleRecord>{});
  return out;
}

std::string index_name(int i) {
  std::ostringstream s;
  s << std::setw(6) << std::setfill('0') << i << ".json";
  return s.str();
}

/// Sources selected for eval / infer: the named one, else every eval split, else all.
std::vector<const SourceSpec*> select_sources(const RunConfig& rc, const std::string& name) {
  std::vector<const SourceSpec*> out;
  for (const auto& s : rc.sources)
    if (name.empty() ? s.split == "eval" : s.name == name) out.push_back(&s);
  if (out.empty() && name.empty())
    for (const auto& s : rc.sources) out.push_back(&s);
  if (out.empty()) throw ConfigError("no data source named " + name);
  return out;
}

/// Decoding vocabulary: training classes for train splits, all classes for eval splits.
ClassVocabulary decode_vocabulary(const SourceSpec& s) {
  return s.split == "train" ? training_vocabulary(s.world) : full_vocabulary(s.world);
}

void write_overlay(const fs::path& path, const Image& img, const PanopticMap& pm) {
  Image out = img;
  for (int y = 0; y < pm.height; ++y)
    for (int x = 0; x < pm.width; ++x) {
      const int id = pm.at(y, x);
      if (id == 0) continue;
      Rng rng(mix_seed(0x5e9, static_cast<std::uint64_t>(id)));
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = static_cast<float>(0.5 * out.at(y, x, c) + 0.5 * rng.uniform());
    }
  io::write_png(path, out);
}

void print_table(const std::map<std::string, std::map<std::string, MetricReport>>& all) {
  std::cout << std::left << std::setw(20) << "source" << std::setw(16) << "metric" << std::right << std::setw(10)
            << "value" << "  details\n";
  for (const auto& [src, reports] : all)
    for (const auto& [name, r] : reports) {
      std::cout << std::left << std::setw(20) << src << std::setw(16) << name << std::right << std::setw(10)
                << std::fixed << std::setprecision(4) << r.value << " ";
      for (const auto& [k, v] : r.extra) std::cout << " " << k << "=" << std::setprecision(4) << v;
      std::cout << "\n";
    }
}

int cmd_gen_data(const Common& c, const fs::path& out) {
  const auto rc = load_config(c);
  if (rc.sources.empty()) throw ConfigError("config has no data sources");
  fs::create_directories(out);
  write_datasets(rc, out);
  json counts = json::object();
  for (const auto& s : rc.sources) counts[s.name] = s.count;
  write_manifest(out, "gen-data", rc, {{"samples", counts}});
  if (c.verbose) std::cerr << "wrote " << rc.sources.size() << " sources to " << out << "\n";
  return 0;
}

int cmd_train(const Common& c, const fs::path& data, const fs::path& out) {
  const auto rc = load_config(c);
  const auto samples = load_train_data(rc, data);
  fs::create_directories(out);
  auto model = build_model(rc);
  std::ofstream log(out / "log.jsonl");
  const auto outcome = train_model(model, rc, samples, &log);
  log.close();
  const auto& world = rc.sources.front().world;
  save_checkpoint(out / "model.omgck", model,
                  {{"vocabulary", full_vocabulary(world)}, {"train_vocabulary", training_vocabulary(world)}, {"train", rc.train}});
  const auto& last = outcome.log.back();
  write_manifest(out, "train", rc,
                 {{"model_hash", model_hash(model)},
                  {"backbone_checksum_before", hex64(outcome.backbone_before)},
                  {"backbone_checksum_after", hex64(outcome.backbone_after)},
                  {"seconds", outcome.seconds},
                  {"final_loss", last.loss}});
  if (c.verbose) std::cerr << "trained " << outcome.log.size() << " steps in " << outcome.seconds << " s\n";
  return 0;
}

int cmd_infer(const Common& c, const fs::path& ckpt, const std::string& task_name, const fs::path& data,
              const std::string& source, const fs::path& out, bool png) {
  const auto rc = load_config(c);
  const auto loaded = load_checkpoint(ckpt);
  fs::create_directories(out);
  for (const auto* s : select_sources(rc, source)) {
    const auto samples = load_source(data, *s);
    const Task task = task_name.empty() ? default_task(s->kind) : task_from_string(task_name);
    const auto vocab = decode_vocabulary(*s);
    const auto dir = out / s->name;
    fs::create_directories(dir);
    for (int i = 0; i < static_cast<int>(samples.size()); ++i) {
      const auto pred = predict(loaded.model, task, samples[static_cast<std::size_t>(i)], i, vocab, rc);
      io::write_json(dir / index_name(i), pred, -1);
      if (png && task == Task::panoptic) {
        auto name = index_name(i);
        name.replace(name.size() - 5, 5, ".png");
        write_overlay(dir / name, samples[static_cast<std::size_t>(i)].frames.front(), pred.at("panoptic").get<PanopticMap>());
      }
    }
  }
  write_manifest(out, "infer", rc, {{"task", task_name}, {"model_hash", loaded.manifest.model_hash}});
  return 0;
}

int cmd_eval(const Common& c, const fs::path& data, const std::string& ckpt, const std::string& pred_dir,
             const std::string& task_name, const std::string& source, const fs::path& out) {
  if (ckpt.empty() == pred_dir.empty()) throw CLI::ValidationError("eval needs exactly one of --checkpoint or --pred");
  const auto rc = load_config(c);
  std::optional<LoadedCheckpoint> loaded;
  if (!ckpt.empty()) loaded = load_checkpoint(ckpt);
  std::map<std::string, std::map<std::string, MetricReport>> all;
  for (const auto* s : select_sources(rc, source)) {
    const auto samples = load_source(data, *s);
    const Task task = task_name.empty() ? default_task(s->kind) : task_from_string(task_name);
    std::vector<json> preds;
    for (int i = 0; i < static_cast<int>(samples.size()); ++i) {
      if (loaded)
        preds.push_back(predict(loaded->model, task, samples[static_cast<std::size_t>(i)], i, decode_vocabulary(*s), rc));
      else
        preds.push_back(io::read_json(fs::path(pred_dir) / s->name / index_name(i)));
    }
    all[s->name] = score(task, preds, samples, full_vocabulary(s->world), rc);
  }
  fs::create_directories(out);
  json metrics = json::object();
  for (const auto& [src, reports] : all)
    for (const auto& [name, r] : reports) metrics[src][name] = r;
  io::write_json(out / "metrics.json", metrics);
  write_manifest(out, "eval", rc);
  print_table(all);
  return 0;
}

std::atomic<httplib::Server*> g_server{nullptr};

int cmd_serve(const Common& c, const fs::path& ckpt, std::optional<int> port, std::optional<std::string> host) {
  auto rc = load_config(c);
  if (port) rc.service.port = *port;
  if (host) rc.service.host = *host;
  validate(rc.service);
  PromptService service(rc.service);
  httplib::Server server;
  mount(server, service);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (auto* s = g_server.load()) s->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (auto* s = g_server.load()) s->stop();
  });
  // health answers 503 until the checkpoint is in
  std::thread loader([&] {
    try {
      auto loaded = load_checkpoint(ckpt);
      ClassVocabulary vocab = run_vocabulary(rc);
      if (loaded.manifest.meta.contains("vocabulary")) vocab = loaded.manifest.meta.at("vocabulary").get<ClassVocabulary>();
      service.load(std::make_shared<const OmgSegModel>(std::move(loaded.model)), vocab, rc.infer, loaded.manifest.model_hash);
      std::cerr << "model " << loaded.manifest.model_hash << " loaded\n";
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      server.stop();
    }
  });
  std::cerr << "listening on " << rc.service.host << ":" << rc.service.port << "\n";
  const bool ok = server.listen(rc.service.host, rc.service.port);
  loader.join();
  g_server = nullptr;
  return ok && service.loaded() ? 0 : 1;
}

int cmd_params(const Common& c, bool as_json) {
  const auto rc = load_config(c);
  const auto r = params_report(rc.model);
  const auto closed = decoder_and_head_closed_form(rc.model);
  if (as_json) {
    std::cout << json{{"backbone", r.backbone},
                      {"pixel_decoder", r.pixel_decoder},
                      {"queries_and_prompts", r.queries_and_prompts},
                      {"decoder_layers", r.decoder_layers},
                      {"heads", r.heads},
                      {"shared_total", r.shared_total},
                      {"decoupled_total", r.decoupled_total},
                      {"trainable_shared", r.trainable_shared},
                      {"decoder_and_heads_closed_form", closed}}
                     .dump(2)
              << "\n";
    return 0;
  }
  std::cout << std::left << std::setw(28) << "backbone (frozen)" << r.backbone << "\n"
            << std::setw(28) << "pixel decoder" << r.pixel_decoder << "\n"
            << std::setw(28) << "queries + prompt encoder" << r.queries_and_prompts << "\n"
            << std::setw(28) << "decoder layers" << r.decoder_layers << "\n"
            << std::setw(28) << "heads" << r.heads << "\n"
            << std::setw(28) << "shared total" << r.shared_total << "\n"
            << std::setw(28) << "decoupled total (3 tasks)" << r.decoupled_total << "\n"
            << std::setw(28) << "saving" << (r.decoupled_total - r.shared_total) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unified image / video / interactive / open-vocabulary segmentation"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "run config JSON");
    sub->add_option("--seed", common.seed, "override every seed in the config");
    sub->add_flag("-v,--verbose", common.verbose);
  };

  std::string out, data, ckpt, pred, task, source;
  std::optional<int> port;
  std::optional<std::string> host;
  bool as_json = false, png = false;

  auto* gen = app.add_subcommand("gen-data", "generate synthetic datasets");
  add_common(gen);
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train);
  train->add_option("--data", data, "dataset directory from gen-data")->required();
  train->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "score predictions or a checkpoint");
  add_common(eval);
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--checkpoint", ckpt, "checkpoint to run");
  eval->add_option("--pred", pred, "prediction directory from infer");
  eval->add_option("--task", task, "panoptic|vis|vps|vos|interactive|ov (default: by source kind)");
  eval->add_option("--source", source, "single data source");
  eval->add_option("--out", out, "output directory")->required();

  auto* infer = app.add_subcommand("infer", "write predictions");
  add_common(infer);
  infer->add_option("--checkpoint", ckpt)->required();
  infer->add_option("--task", task, "panoptic|vis|vps|vos|interactive|ov (default: by source kind)");
  infer->add_option("--data", data, "dataset directory")->required();
  infer->add_option("--source", source, "single data source");
  infer->add_option("--out", out, "output directory")->required();
  infer->add_flag("--png", png, "write panoptic overlays");

  auto* serve = app.add_subcommand("serve", "run the prompt service");
  add_common(serve);
  serve->add_option("--checkpoint", ckpt)->required();
  serve->add_option("--port", port);
  serve->add_option("--host", host);

  auto* params = app.add_subcommand("params", "shared vs decoupled parameter counts");
  add_common(params);
  params->add_flag("--json", as_json);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(common, out);
    if (*train) return cmd_train(common, data, out);
    if (*eval) return cmd_eval(common, data, ckpt, pred, task, source, out);
    if (*infer) return cmd_infer(common, ckpt, task, data, source, out, png);
    if (*serve) return cmd_serve(common, ckpt, port, host);
    if (*params) return cmd_params(common, as_json);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const CLI::Error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
