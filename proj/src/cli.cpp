#include "pes/cli.hpp"

#include "pes/checkpoint.hpp"
#include "pes/error.hpp"
#include "pes/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace pes {

namespace {

using nlohmann::json;

constexpr const char* kResultsVersion = "pes-results/1";

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return 2;
    case ErrorCategory::argument: return 3;
    case ErrorCategory::shape: return 4;
    case ErrorCategory::numeric: return 5;
    case ErrorCategory::schema: return 6;
    case ErrorCategory::io: return 7;
    case ErrorCategory::state: return 8;
  }
  return 1;
}

int report_error(std::string_view category, const std::string& message, int code) {
  json j = {{"error", {{"category", category}, {"message", message}}}};
  std::cerr << j.dump() << '\n';
  return code;
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

/// Options shared by every subcommand; flags first, then the config file on top.
struct Options {
  RunConfig cfg;
  std::string config_file;
  std::string out_dir;
  std::string data_dir;
  std::string schema_file;
  std::string strategy;

  std::string teacher, rgb, flow, model;
  std::string pool = "test";
  bool with_distillation = false;
  std::vector<std::string> results;
};

void add_common(CLI::App* cmd, Options& o) {
  auto& c = o.cfg;
  cmd->add_option("--config", o.config_file, "JSON config; its keys override flags");
  cmd->add_option("--out", o.out_dir, "Output directory (default: $PES_OUTPUT_ROOT or ./runs)");
  cmd->add_option("--data", o.data_dir, "Dataset directory (default: <out>/data)");
  cmd->add_option("--schema", o.schema_file, "Label schema file (default: built-in tennis schema)");
  cmd->add_option("--seed", c.seed, "Seed for data generation, splitting and training");
  cmd->add_option("--seeds", c.seeds, "Seed list for ablate");
  cmd->add_option("--k", c.k, "Number of labeled clips");
  cmd->add_option("--train-pool", c.train_pool, "Training-pool clips");
  cmd->add_option("--val-clips", c.val_clips, "Validation clips");
  cmd->add_option("--test-clips", c.test_clips, "Test clips");
  cmd->add_option("--frames", c.gen.frames, "Frames per clip");
  cmd->add_option("--event-rate", c.gen.event_rate, "Per-frame event hazard");
  cmd->add_option("--stage1-epochs", c.stage1_epochs);
  cmd->add_option("--stage2-epochs", c.stage2_epochs);
  cmd->add_option("--stage3-epochs", c.stage3_epochs);
  cmd->add_option("--awd-epochs", c.awd_epochs);
  cmd->add_option("--strategy", o.strategy, "labeled_only | joint | delayed | best_continuation");
  cmd->add_option("--anneal-start", c.anneal.start);
  cmd->add_option("--anneal-end", c.anneal.end);
  cmd->add_option("--anneal-target", c.anneal.target);
  cmd->add_option("--lr", c.optim.lr);
  cmd->add_option("--warmup", c.optim.warmup);
  cmd->add_option("--batch-size", c.optim.batch_size);
  cmd->add_option("--batches-per-epoch", c.optim.batches_per_epoch);
  cmd->add_option("--weight-decay", c.optim.adam.weight_decay);
  cmd->add_option("--fg-weight", c.fg_weight);
  cmd->add_option("--hidden", c.model.hidden);
  cmd->add_option("--recurrent", c.model.recurrent);
  cmd->add_option("--embed", c.model.embed);
  cmd->add_option("--knn-k", c.knn_k);
  cmd->add_option("--awd-refresh", c.awd_refresh, "Epochs between mapping rebuilds (0 = once)");
  cmd->add_option("--delta", c.eval_delta, "F1 temporal tolerance in frames");
  cmd->add_option("--threshold", c.decode.threshold);
  cmd->add_option("--window", c.decode.window);
}

void finalize(Options& o) {
  if (!o.strategy.empty()) o.cfg.strategy = strategy_from_string(o.strategy);
  if (!o.config_file.empty()) {
    std::ifstream in(o.config_file);
    require(static_cast<bool>(in), ErrorCategory::io, "cannot open config file " + o.config_file);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      fail(ErrorCategory::config, "config file " + o.config_file + ": " + e.what());
    }
    o.cfg = config_from_json(j, o.cfg);
  }
  if (o.out_dir.empty()) {
    const char* env = std::getenv("PES_OUTPUT_ROOT");
    o.out_dir = env && *env ? env : "runs";
  }
  if (o.data_dir.empty()) o.data_dir = (std::filesystem::path(o.out_dir) / "data").string();
  o.cfg.validate();
}

LabelSchema load_schema(const Options& o) {
  return o.schema_file.empty() ? LabelSchema::tennis() : LabelSchema::load(o.schema_file);
}

void write_results(const Options& o, const std::string& command, const std::string& file, json result) {
  std::filesystem::create_directories(o.out_dir);
  json j = {{"schema_version", kResultsVersion},
            {"command", command},
            {"config_hash", hex(config_hash(o.cfg))},
            {"seed", o.cfg.seed},
            {"config", to_json(o.cfg)},
            {"result", std::move(result)}};
  const auto path = std::filesystem::path(o.out_dir) / file;
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCategory::io, "cannot write results file " + path.string());
  out << j.dump(2) << '\n';
  std::cout << "wrote " << path.string() << '\n';
}

std::filesystem::path data_file(const Options& o, const char* name) {
  return std::filesystem::path(o.data_dir) / name;
}

DatasetSplit load_split(const Options& o, const LabelSchema& schema) {
  auto pool = load_dataset(data_file(o, "train.jsonl"), schema);
  auto val = load_dataset(data_file(o, "val.jsonl"), schema);
  auto test = load_dataset(data_file(o, "test.jsonl"), schema);
  std::ifstream in(data_file(o, "split.json"));
  require(static_cast<bool>(in), ErrorCategory::io, "missing split.json in " + o.data_dir + " (run `split` first)");
  json sj;
  try {
    in >> sj;
  } catch (const json::exception& e) {
    fail(ErrorCategory::io, std::string("bad split.json: ") + e.what());
  }
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < pool.size(); ++i) by_id[pool[i].clip_id] = i;
  std::vector<ClipSample> labeled, unlabeled;
  std::vector<char> used(pool.size(), 0);
  for (const auto& id : sj.at("labeled")) {
    auto it = by_id.find(id.get<std::string>());
    require(it != by_id.end(), ErrorCategory::io, "split names unknown clip " + id.get<std::string>());
    require(!used[it->second], ErrorCategory::io, "split lists clip " + it->first + " twice");
    used[it->second] = 1;
    labeled.push_back(pool[it->second]);
  }
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (!used[i]) unlabeled.push_back(pool[i]);
  return DatasetSplit(std::move(labeled), std::move(unlabeled), std::move(val), std::move(test));
}

ModelState load_model(const std::string& path, const LabelSchema& schema) {
  const LoadedCheckpoint ck = load_checkpoint(path);
  require(ck.meta.schema_hash == schema.hash(), ErrorCategory::schema,
          "checkpoint " + path + " was trained with a different label schema");
  return ck.state;
}

std::string default_path(const Options& o, const std::string& given, const char* name) {
  return given.empty() ? (std::filesystem::path(o.out_dir) / name).string() : given;
}

int cmd_generate(Options& o) {
  const LabelSchema schema = load_schema(o);
  std::filesystem::create_directories(o.data_dir);
  GenConfig g = o.cfg.gen;
  g.context = 0;
  g.num_clips = o.cfg.train_pool;
  const auto pool = generate_dataset(g, schema, Rng::derive(o.cfg.seed, 1));
  g.num_clips = o.cfg.val_clips;
  const auto val = generate_dataset(g, schema, Rng::derive(o.cfg.seed, 2));
  g.context = 1;
  g.num_clips = o.cfg.test_clips;
  const auto test = generate_dataset(g, schema, Rng::derive(o.cfg.seed, 3));
  save_dataset(data_file(o, "train.jsonl"), pool);
  save_dataset(data_file(o, "val.jsonl"), val);
  save_dataset(data_file(o, "test.jsonl"), test);
  {
    std::ofstream s(data_file(o, "schema.txt"), std::ios::binary);
    s << schema.to_text();
  }
  auto count_events = [](const std::vector<ClipSample>& clips) {
    std::size_t n = 0;
    for (const auto& c : clips) n += c.labels.events.size();
    return n;
  };
  write_results(o, "generate", "generate.json",
                {{"train_clips", pool.size()},
                 {"val_clips", val.size()},
                 {"test_clips", test.size()},
                 {"train_events", count_events(pool)},
                 {"val_events", count_events(val)},
                 {"test_events", count_events(test)},
                 {"schema_hash", hex(schema.hash())}});
  return 0;
}

int cmd_split(Options& o) {
  const LabelSchema schema = load_schema(o);
  const auto pool = load_dataset(data_file(o, "train.jsonl"), schema);
  const auto chosen = k_clip_indices(pool.size(), o.cfg.k, Rng::derive(o.cfg.seed, 4));
  json labeled = json::array(), unlabeled = json::array();
  std::size_t next = 0;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (next < chosen.size() && chosen[next] == i) {
      labeled.push_back(pool[i].clip_id);
      ++next;
    } else {
      unlabeled.push_back(pool[i].clip_id);
    }
  }
  json sj = {{"k", o.cfg.k}, {"seed", o.cfg.seed}, {"labeled", labeled}, {"unlabeled", unlabeled}};
  {
    std::ofstream out(data_file(o, "split.json"), std::ios::binary);
    require(static_cast<bool>(out), ErrorCategory::io, "cannot write split.json");
    out << sj.dump(2) << '\n';
  }
  write_results(o, "split", "split-summary.json", {{"labeled", labeled.size()}, {"unlabeled", unlabeled.size()}});
  return 0;
}

int cmd_stage1(Options& o) {
  const LabelSchema schema = load_schema(o);
  const DatasetSplit split = load_split(o, schema);
  const StageContext ctx{o.cfg, schema, std::filesystem::path(o.out_dir)};
  const StageResult r = run_stage1(ctx, split, o.cfg.seed);
  json j = to_json(r.record);
  j["strategy"] = std::string(to_string(o.cfg.strategy));
  write_results(o, "train-stage1", "stage1.json", std::move(j));
  return 0;
}

int cmd_stage2(Options& o) {
  const LabelSchema schema = load_schema(o);
  const DatasetSplit split = load_split(o, schema);
  const ModelState teacher = load_model(default_path(o, o.teacher, "stage1.ckpt"), schema);
  const StageContext ctx{o.cfg, schema, std::filesystem::path(o.out_dir)};
  const Stage2Result r = run_stage2(ctx, teacher, split, o.cfg.seed);
  json j = to_json(r.record);
  j["label_reads"] = split.label_reads(Pool::labeled) + split.label_reads(Pool::unlabeled);
  write_results(o, "train-stage2", "stage2.json", std::move(j));
  return 0;
}

int cmd_stage3(Options& o) {
  const LabelSchema schema = load_schema(o);
  const DatasetSplit split = load_split(o, schema);
  const ModelState rgb = load_model(default_path(o, o.rgb, "student_rgb.ckpt"), schema);
  const ModelState flow = load_model(default_path(o, o.flow, "student_flow.ckpt"), schema);
  const StageContext ctx{o.cfg, schema, std::filesystem::path(o.out_dir)};
  const StageResult r = run_stage3(ctx, rgb, flow, split, o.cfg.seed);
  json j = to_json(r.record);
  j["unlabeled_label_reads"] = split.label_reads(Pool::unlabeled);
  write_results(o, "train-stage3", "stage3.json", std::move(j));
  return 0;
}

int cmd_awd(Options& o) {
  const LabelSchema schema = load_schema(o);
  const DatasetSplit split = load_split(o, schema);
  const ModelState teacher = load_model(default_path(o, o.teacher, "stage1.ckpt"), schema);
  const StageContext ctx{o.cfg, schema, std::filesystem::path(o.out_dir)};
  const StageResult r = run_awd(ctx, teacher, split, o.cfg.seed);
  write_results(o, "train-awd", "awd.json", to_json(r.record));
  return 0;
}

int cmd_evaluate(Options& o) {
  const LabelSchema schema = load_schema(o);
  const ModelState m = load_model(default_path(o, o.model, "stage3.ckpt"), schema);
  const char* file = o.pool == "val" ? "val.jsonl" : o.pool == "test" ? "test.jsonl" : nullptr;
  require(file != nullptr, ErrorCategory::argument, "--pool must be val or test");
  const auto clips = load_dataset(data_file(o, file), schema);
  const EvalReport rep = evaluate_split(predictor_for(m), clips, schema, o.cfg.eval_delta, o.cfg.decode);
  json j = to_json(rep);
  j["pool"] = o.pool;
  j["model"] = std::filesystem::path(default_path(o, o.model, "stage3.ckpt")).filename().string();
  write_results(o, "evaluate", "evaluate.json", std::move(j));
  return 0;
}

int cmd_ablate(Options& o) {
  const LabelSchema schema = load_schema(o);
  const AblationTable t = run_ablation(o.cfg, schema, o.with_distillation);
  write_results(o, "ablate", "ablation.json", to_json(t));
  std::cout << std::fixed << std::setprecision(2);
  for (const auto& r : t.rows)
    std::cout << std::left << std::setw(20) << r.name << " test Edit " << mean(r.test_edit) << " +- "
              << stddev(r.test_edit) << "  (median " << median(r.test_edit) << ")\n";
  return 0;
}

int cmd_report(Options& o) {
  require(!o.results.empty(), ErrorCategory::argument, "report needs at least one --results file");
  std::ostringstream md;
  md << std::fixed << std::setprecision(2);
  md << "| file | command | metric | value |\n|---|---|---|---|\n";
  for (const auto& f : o.results) {
    std::ifstream in(f);
    require(static_cast<bool>(in), ErrorCategory::io, "cannot open results file " + f);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      fail(ErrorCategory::io, f + ": " + e.what());
    }
    require(j.value("schema_version", "") == kResultsVersion, ErrorCategory::io, f + " is not a results file");
    const std::string cmd = j.at("command").get<std::string>();
    const json& r = j.at("result");
    const std::string name = std::filesystem::path(f).filename().string();
    if (r.contains("rows")) {
      for (const auto& row : r.at("rows"))
        if (row.contains("test_edit_mean"))
          md << "| " << name << " | " << cmd << " | " << row.at("name").get<std::string>() << " test Edit | "
             << row.at("test_edit_mean").get<double>() << " +- " << row.at("test_edit_std").get<double>() << " |\n";
    } else if (r.contains("test")) {
      md << "| " << name << " | " << cmd << " | test Edit | " << r.at("test").at("edit").get<double>() << " |\n";
      md << "| " << name << " | " << cmd << " | test F1 | " << r.at("test").at("f1_evt").get<double>() << " |\n";
    } else if (r.contains("edit")) {
      md << "| " << name << " | " << cmd << " | Edit | " << r.at("edit").get<double>() << " |\n";
      md << "| " << name << " | " << cmd << " | F1 | " << r.at("f1_evt").get<double>() << " |\n";
    } else {
      md << "| " << name << " | " << cmd << " | - | - |\n";
    }
  }
  std::cout << md.str();
  std::filesystem::create_directories(o.out_dir);
  std::ofstream out(std::filesystem::path(o.out_dir) / "report.md", std::ios::binary);
  out << md.str();
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"pes: pose-teacher, video-student event detection on synthetic clips"};
  app.require_subcommand(1);
  Options o;

  struct Sub {
    const char* name;
    const char* help;
    int (*run)(Options&);
  };
  const Sub subs[] = {
      {"generate", "Generate a synthetic multimodal benchmark", cmd_generate},
      {"split", "Choose the k labeled clips", cmd_split},
      {"train-stage1", "Semi-supervised skeleton teacher", cmd_stage1},
      {"train-stage2", "Distill rgb and flow students from the teacher", cmd_stage2},
      {"train-stage3", "Few-shot fine-tuning of the fused students", cmd_stage3},
      {"train-awd", "Adaptive-weight prediction distillation", cmd_awd},
      {"evaluate", "Evaluate a checkpoint", cmd_evaluate},
      {"ablate", "Stage I integration-strategy ablation", cmd_ablate},
      {"report", "Summarize results files", cmd_report},
  };
  std::vector<std::pair<CLI::App*, const Sub*>> cmds;
  for (const auto& s : subs) {
    CLI::App* c = app.add_subcommand(s.name, s.help);
    add_common(c, o);
    cmds.emplace_back(c, &s);
  }
  for (auto& [c, s] : cmds) {
    const std::string n = s->name;
    if (n == "train-stage2" || n == "train-awd") c->add_option("--teacher", o.teacher, "Stage I checkpoint");
    if (n == "train-stage3") {
      c->add_option("--rgb", o.rgb, "Stage II rgb student checkpoint");
      c->add_option("--flow", o.flow, "Stage II flow student checkpoint");
    }
    if (n == "evaluate") {
      c->add_option("--model", o.model, "Checkpoint to evaluate");
      c->add_option("--pool", o.pool, "val | test");
    }
    if (n == "ablate") c->add_flag("--with-distillation", o.with_distillation, "Add distillation rows");
    if (n == "report") c->add_option("--results", o.results, "Results files")->expected(1, -1);
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("argument", e.what(), 3);
  }

  try {
    for (auto& [c, s] : cmds)
      if (c->parsed()) {
        finalize(o);
        return s->run(o);
      }
  } catch (const Error& e) {
    return report_error(to_string(e.category()), e.what(), exit_code(e.category()));
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), 1);
  }
  return 1;
}

}  // namespace pes
