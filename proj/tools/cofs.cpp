// cofs: dataset generation, training, sampling, scoring, evaluation and the
// HTTP service.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <boost/iostreams/stream.hpp>
#include <boost/iostreams/tee.hpp>
#include <httplib.h>
#include <json.hpp>

#include "cofs/api.hpp"
#include "cofs/eval.hpp"
#include "cofs/io.hpp"
#include "cofs/sampling.hpp"
#include "cofs/server.hpp"
#include "cofs/synth.hpp"
#include "cofs/training.hpp"

using namespace cofs;
using nlohmann::json;

namespace {

ClassSchema read_schema_file(const std::string& path) {
  std::istringstream in(read_text_file(path));
  return read_class_schema(in);
}

std::string schema_path_for(const std::string& data) { return data + ".classes"; }

struct GenData {
  std::string config, out, schema, svg_dir;
  std::uint64_t seed = 0;
  std::size_t count = 1000, svg_count = 8;
  bool seed_set = false;

  int run() const {
    GrammarConfig cfg = config.empty() ? GrammarConfig{} : read_grammar_config_file(config);
    if (seed_set) cfg.seed = seed;
    const auto data = generate_dataset(cfg, count);
    std::ostringstream classes;
    write_class_schema(classes, cfg.schema());
    write_layouts_file(out, data);
    write_file_atomic(schema.empty() ? schema_path_for(out) : schema, classes.str());
    if (!svg_dir.empty()) {
      std::filesystem::create_directories(svg_dir);
      const ClassSchema s = cfg.schema();
      for (std::size_t i = 0; i < std::min(svg_count, data.size()); ++i) {
        write_file_atomic(svg_dir + "/layout_" + std::to_string(i) + ".svg", render_svg(data[i], &s));
      }
    }
    const Diagnostics d = diagnostics(data);
    std::cerr << "wrote " << data.size() << " layouts to " << out << " (mean objects " << d.mean_objects << ")\n";
    return 0;
  }
};

struct Train {
  std::string data, schema, config, out, metrics, init_from;
  std::uint64_t seed = 0;
  bool seed_set = false;
  double val_fraction = 0.1;
  std::size_t max_objects = 12, layers = 4, d_model = 64, heads = 4, ffn = 256;

  int run() const {
    TrainConfig tc = config.empty() ? TrainConfig{} : read_train_config_file(config);
    if (seed_set) tc.seed = seed;
    const ClassSchema classes = read_schema_file(schema.empty() ? schema_path_for(data) : schema);
    const auto layouts = read_layouts_file(data);
    if (layouts.size() < 2) throw std::runtime_error("train: need at least two layouts");
    const SplitIndices split = split_dataset(layouts.size(), {1.0 - val_fraction, val_fraction, 0.0}, tc.seed);
    if (split.val.empty() || split.train.empty()) throw std::runtime_error("train: validation fraction leaves an empty split");
    std::vector<Layout> train_set, val_set;
    for (std::size_t i : split.train) train_set.push_back(layouts[i]);
    for (std::size_t i : split.val) val_set.push_back(layouts[i]);

    ModelConfig mc = ModelConfig::desk(classes.size());
    mc.encoder_layers = mc.decoder_layers = layers;
    mc.d_model = d_model;
    mc.heads = heads;
    mc.ffn_hidden = ffn;
    mc.max_objects = max_objects;
    mc.raster_side = layouts.front().boundary.width;
    mc.validate();
    for (const auto& l : layouts) {
      if (l.boxes.size() > mc.max_objects) throw std::runtime_error("train: a layout exceeds --max-objects");
      for (const auto& b : l.boxes)
        if (b.cls >= classes.size()) throw std::runtime_error("train: class id outside the schema");
    }

    ModelBundle bundle{Model(mc, tc.seed), classes, AttributeNormalizer::fit(train_set, tc.rotation_augment)};
    if (!init_from.empty()) {
      const ModelBundle source = load_bundle(init_from);
      ModelConfig expect = source.model.config();
      expect.num_classes = mc.num_classes;
      if (!(expect == mc)) throw std::runtime_error("train: --init-from checkpoint has a different architecture");
      bundle.model = transfer_init(source.model, classes.size(), tc.seed);
    }

    std::ostringstream log;
    namespace io = boost::iostreams;
    io::tee_device<std::ostream, std::ostream> tee(log, std::cerr);
    io::stream<io::tee_device<std::ostream, std::ostream>> both(tee);
    const TrainResult r = train(bundle.model, train_set, val_set, bundle.normalizer, tc, &both);
    both.flush();
    save_bundle(out, bundle);
    if (!metrics.empty()) write_file_atomic(metrics, log.str());
    std::cerr << "epochs " << r.epochs_run << ", steps " << r.steps << ", val nll " << r.baseline_val_nll << " -> "
              << r.best_val_nll << " (epoch " << r.best_epoch << ")\n";
    return 0;
  }
};

struct Sample {
  std::string weights, constraints, rooms, out;
  std::uint64_t seed = 0;
  std::size_t count = 1;
  double temperature = 1.0;

  int run() const {
    if (constraints.empty() && rooms.empty()) throw CLI::ValidationError("sample", "give --constraints, --rooms or both");
    const ModelBundle bundle = load_bundle(weights);
    SampleOptions opts;
    opts.temperature = temperature;
    std::optional<json> req;
    std::optional<WorldSpec> ws;
    if (!constraints.empty()) {
      req = json::parse(read_text_file(constraints));
      ws = spec_from_json(req->at("objectCount"), req->value("constraints", json()), bundle);
    }
    std::vector<Layout> room_set;
    if (!rooms.empty()) {
      room_set = read_layouts_file(rooms);
      if (room_set.empty()) throw std::runtime_error("sample: no rooms in " + rooms);
    } else {
      if (!req->contains("boundary")) throw std::runtime_error("sample: " + constraints + " has no boundary; pass --rooms");
      room_set.push_back(Layout{boundary_from_json(req->at("boundary")), {}});
    }
    std::vector<Layout> out_layouts;
    for (std::size_t i = 0; i < count; ++i) {
      const Layout& room = room_set[i % room_set.size()];
      ConstraintSpec spec;
      if (ws)
        spec = ws->spec;
      else
        spec.object_count = room.boxes.size();
      Rng rng = Rng::derive(seed, i);
      SampleResult r = sample_cofs(bundle.model, bundle.normalizer, room.boundary, spec, rng, opts);
      if (ws) restore_constrained(r.layout, *ws);
      out_layouts.push_back(std::move(r.layout));
    }
    write_layouts_file(out, out_layouts);
    return 0;
  }
};

struct Complete {
  std::string weights, layout, out;
  std::uint64_t seed = 0;
  std::size_t count = 1;
  double temperature = 1.0;

  int run() const {
    const ModelBundle bundle = load_bundle(weights);
    const auto inputs = read_layouts_file(layout);
    std::vector<Layout> results;
    SampleOptions opts;
    opts.temperature = temperature;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Rng rng = Rng::derive(seed, i);
      SampleResult r =
          complete_scene(bundle.model, bundle.normalizer, inputs[i].boundary, inputs[i].boxes, count, rng, opts);
      std::copy(inputs[i].boxes.begin(), inputs[i].boxes.end(), r.layout.boxes.begin());
      results.push_back(std::move(r.layout));
    }
    write_layouts_file(out, results);
    return 0;
  }
};

struct Score {
  std::string weights, data, out;

  int run() const {
    const ModelBundle bundle = load_bundle(weights);
    const auto layouts = read_layouts_file(data);
    std::ostringstream os;
    for (std::size_t i = 0; i < layouts.size(); ++i) {
      const auto ranked = rank_by_score(score_tokens(bundle.model, bundle.normalizer, layouts[i]));
      os << json{{"index", i}, {"scores", scores_to_json(ranked, layouts[i], bundle.schema)}}.dump() << '\n';
    }
    write_file_atomic(out, os.str());
    return 0;
  }
};

struct Eval {
  std::string generated, reference, schema, out;

  int run() const {
    const ClassSchema classes = read_schema_file(schema.empty() ? schema_path_for(reference) : schema);
    const auto gen = read_layouts_file(generated);
    const auto ref = read_layouts_file(reference);
    const std::string report = evaluation_report(gen, ref, classes);
    if (out.empty())
      std::cout << report << '\n';
    else
      write_file_atomic(out, report + "\n");
    return 0;
  }
};

struct Serve {
  std::string weights;
  ServerOptions options;

  int run() const {
    const ModelBundle bundle = load_bundle(weights);
    const Api api(bundle, model_id_for_file(weights), &std::cerr);
    httplib::Server server;
    mount(server, api, options);
    std::cerr << "serving on http://" << options.host << ':' << options.port << '\n';
    if (!server.listen(options.host, options.port)) throw std::runtime_error("cannot listen on port " + std::to_string(options.port));
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Controllable furniture layout generation"};
  app.require_subcommand(1);

  GenData gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic bedroom dataset");
  g->add_option("--config", gen.config, "Grammar config file")->check(CLI::ExistingFile);
  g->add_option("--seed", gen.seed, "Dataset seed (overrides the config)")->each([&](const std::string&) { gen.seed_set = true; });
  g->add_option("--count", gen.count, "Number of layouts")->check(CLI::PositiveNumber);
  g->add_option("--out", gen.out, "Output dataset (JSON lines)")->required();
  g->add_option("--schema", gen.schema, "Class schema output (default <out>.classes)");
  g->add_option("--svg-dir", gen.svg_dir, "Also render the first layouts as SVG here");
  g->add_option("--svg-count", gen.svg_count, "Number of SVG renderings");

  Train tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--data", tr.data, "Dataset (JSON lines)")->required()->check(CLI::ExistingFile);
  t->add_option("--schema", tr.schema, "Class schema (default <data>.classes)");
  t->add_option("--config", tr.config, "Training config file")->check(CLI::ExistingFile);
  t->add_option("--seed", tr.seed, "Training seed (overrides the config)")->each([&](const std::string&) { tr.seed_set = true; });
  t->add_option("--out", tr.out, "Checkpoint output")->required();
  t->add_option("--metrics", tr.metrics, "Metrics log output (JSON lines)");
  t->add_option("--val-fraction", tr.val_fraction, "Fraction held out for validation")->check(CLI::Range(0.0, 1.0));
  t->add_option("--max-objects", tr.max_objects, "Object capacity k_max");
  t->add_option("--layers", tr.layers, "Encoder and decoder depth");
  t->add_option("--d-model", tr.d_model, "Model width");
  t->add_option("--heads", tr.heads, "Attention heads");
  t->add_option("--ffn", tr.ffn, "Feed-forward width");
  t->add_option("--init-from", tr.init_from, "Initialize from a checkpoint (class weights redrawn)")->check(CLI::ExistingFile);

  Sample sm;
  auto* s = app.add_subcommand("sample", "Sample layouts");
  s->add_option("--weights", sm.weights, "Checkpoint")->required()->check(CLI::ExistingFile);
  s->add_option("--constraints", sm.constraints, "Request file {boundary, objectCount, constraints}")->check(CLI::ExistingFile);
  s->add_option("--rooms", sm.rooms, "Dataset whose boundaries (and, without --constraints, object counts) are reused")->check(CLI::ExistingFile);
  s->add_option("--seed", sm.seed, "Sampling seed");
  s->add_option("--count", sm.count, "Number of layouts")->check(CLI::PositiveNumber);
  s->add_option("--temperature", sm.temperature, "Sampling temperature")->check(CLI::NonNegativeNumber);
  s->add_option("--out", sm.out, "Output layouts (JSON lines)")->required();

  Complete cp;
  auto* c = app.add_subcommand("complete", "Add objects to existing layouts");
  c->add_option("--weights", cp.weights, "Checkpoint")->required()->check(CLI::ExistingFile);
  c->add_option("--layout", cp.layout, "Input layouts (JSON lines)")->required()->check(CLI::ExistingFile);
  c->add_option("--count", cp.count, "Objects to add per layout");
  c->add_option("--seed", cp.seed, "Sampling seed");
  c->add_option("--temperature", cp.temperature, "Sampling temperature")->check(CLI::NonNegativeNumber);
  c->add_option("--out", cp.out, "Output layouts (JSON lines)")->required();

  Score sc;
  auto* o = app.add_subcommand("score", "Rank objects by pseudo-likelihood");
  o->add_option("--weights", sc.weights, "Checkpoint")->required()->check(CLI::ExistingFile);
  o->add_option("--data", sc.data, "Layouts (JSON lines)")->required()->check(CLI::ExistingFile);
  o->add_option("--out", sc.out, "Scores output (JSON lines)")->required();

  Eval ev;
  auto* e = app.add_subcommand("eval", "Class KL and layout diagnostics");
  e->add_option("--generated", ev.generated, "Generated layouts")->required()->check(CLI::ExistingFile);
  e->add_option("--reference", ev.reference, "Reference layouts")->required()->check(CLI::ExistingFile);
  e->add_option("--schema", ev.schema, "Class schema (default <reference>.classes)");
  e->add_option("--out", ev.out, "Report output (default stdout)");

  Serve sv;
  auto* v = app.add_subcommand("serve", "Run the HTTP inference service");
  v->add_option("--weights", sv.weights, "Checkpoint")->required()->check(CLI::ExistingFile);
  v->add_option("--host", sv.options.host, "Bind address");
  v->add_option("--port", sv.options.port, "Port");
  v->add_option("--cors-origin", sv.options.cors_origin, "Allowed CORS origin");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }
  try {
    if (*g) return gen.run();
    if (*t) return tr.run();
    if (*s) return sm.run();
    if (*c) return cp.run();
    if (*o) return sc.run();
    if (*e) return ev.run();
    if (*v) return sv.run();
  } catch (const CLI::Error& err) {
    return app.exit(err);
  } catch (const std::exception& err) {
    std::cerr << "cofs: error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
