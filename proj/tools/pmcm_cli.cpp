#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "pmcm/pmcm.hpp"

namespace {

using namespace pmcm;

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

// Flag value, else PMCM_OUT_DIR, else the fallback.
fs::path resolve_out(const std::string& flag, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (auto e = env("PMCM_OUT_DIR")) return fs::path(*e) / fallback;
  return fallback;
}

std::size_t resolve_workers(std::size_t flag) {
  if (flag > 0) return flag;
  if (auto e = env("PMCM_WORKERS")) {
    const long v = std::stol(*e);
    if (v < 1) throw std::invalid_argument("PMCM_WORKERS must be >= 1");
    return static_cast<std::size_t>(v);
  }
  return 1;
}

std::vector<MultimodalSample> test_split(const fs::path& file) {
  const auto records = read_corpus_jsonl(file);
  std::vector<MultimodalSample> test, all;
  for (const auto& r : records) {
    all.push_back(r.sample);
    if (r.split == "test") test.push_back(r.sample);
  }
  return test.empty() ? all : test;
}

// "l2", "cosine", "classifier:ensemble", "prior:paramavg", "oracle"
std::pair<MatcherKind, MatcherMode> parse_matcher_arg(const std::string& arg) {
  const auto colon = arg.find(':');
  const MatcherKind kind = parse_matcher_kind(arg.substr(0, colon));
  MatcherMode mode = MatcherMode::None;
  if (colon != std::string::npos) mode = parse_matcher_mode(arg.substr(colon + 1));
  if (model_based(kind) && mode == MatcherMode::None) throw std::invalid_argument("matcher '" + arg + "' needs a mode, e.g. " + arg + ":ensemble");
  if (!model_based(kind) && mode != MatcherMode::None) throw std::invalid_argument("matcher '" + arg + "' takes no mode");
  return {kind, mode};
}

std::optional<Matcher> pick_matcher(MatcherKind kind, MatcherMode mode, Family family, const std::vector<Matcher>& trained) {
  if (!model_based(kind)) return model_free_matcher(kind, family);
  for (const auto& m : trained)
    if (m.kind == kind && m.mode == mode && m.family == family) return m;
  return std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-mask federated multimodal learning toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic two-modality corpus (JSON lines)");
  std::string gen_config, gen_out;
  CorpusSpec gen_spec;
  gen->add_option("--config", gen_config, "Corpus spec JSON file");
  gen->add_option("--out", gen_out, "Output corpus file");
  gen->add_option("--classes", gen_spec.classes);
  gen->add_option("--train-per-class", gen_spec.train_per_class);
  gen->add_option("--test-per-class", gen_spec.test_per_class);
  gen->add_option("--noise", gen_spec.noise);
  gen->add_option("--seed", gen_spec.seed);

  // train
  auto* train = app.add_subcommand("train", "Run one federated training job");
  std::string train_config, train_data, train_out;
  std::size_t train_workers = 0;
  bool keep_clients = false;
  train->add_option("--config", train_config, "Run config JSON")->required();
  train->add_option("--data", train_data, "Corpus file")->required();
  train->add_option("--out", train_out, "Run directory");
  train->add_option("--workers", train_workers, "Client worker threads");
  train->add_flag("--keep-client-models", keep_clients, "Also save the last round's client models");

  // infer
  auto* inf = app.add_subcommand("infer", "Evaluate a checkpoint with missing-modality stand-ins");
  std::string inf_ckpt, inf_lib, inf_matcher = "l2", inf_matchers_file, inf_drop = "none", inf_test, inf_mask = "prototype", inf_out;
  std::size_t inf_k = 1;
  std::uint64_t inf_seed = 1;
  inf->add_option("--checkpoint", inf_ckpt, "Checkpoint stem or .json")->required();
  inf->add_option("--library", inf_lib, "Prototype library file")->required();
  inf->add_option("--test", inf_test, "Corpus file (test split is used)")->required();
  inf->add_option("--matcher", inf_matcher, "l1|l2|cosine|oracle|classifier:<mode>|prior:<mode>");
  inf->add_option("--matchers", inf_matchers_file, "Trained matchers file");
  inf->add_option("--mix-k", inf_k, "ProtoMix top-k");
  inf->add_option("--drop-modality", inf_drop, "image|text|none")->check(CLI::IsMember({"image", "text", "none"}));
  inf->add_option("--mask", inf_mask, "prototype|zero|random|oracle")->check(CLI::IsMember({"prototype", "zero", "random", "oracle"}));
  inf->add_option("--seed", inf_seed, "Seed for random stand-ins");
  inf->add_option("--out", inf_out, "Report JSON file (stdout when omitted)");

  // matrix
  auto* mat = app.add_subcommand("matrix", "Run a configuration x missing-rate x seed matrix");
  std::string mat_spec, mat_out;
  std::size_t mat_workers = 0;
  mat->add_option("--spec", mat_spec, "Experiment spec JSON")->required();
  mat->add_option("--out", mat_out, "Output directory");
  mat->add_option("--workers", mat_workers, "Parallel cells");

  // report
  auto* rep = app.add_subcommand("report", "Summarize completed run directories");
  std::vector<std::string> rep_dirs;
  std::string rep_out;
  rep->add_option("runs", rep_dirs, "Run directories or roots containing them")->required();
  rep->add_option("--out", rep_out, "Report directory");

  // dump-reps
  auto* dump = app.add_subcommand("dump-reps", "Write fused test representations as CSV");
  std::string dump_ckpt, dump_test, dump_out;
  std::optional<std::size_t> dump_client;
  dump->add_option("--checkpoint", dump_ckpt, "Checkpoint stem or .json")->required();
  dump->add_option("--test", dump_test, "Corpus file (test split is used)")->required();
  dump->add_option("--out", dump_out, "CSV file");
  dump->add_option("--client", dump_client, "Client id to record in each row");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      CorpusSpec spec = gen_spec;
      if (!gen_config.empty()) {
        spec = read_json_file(gen_config).get<CorpusSpec>();
        for (const auto* opt : {"--classes", "--train-per-class", "--test-per-class", "--noise", "--seed"})
          if (gen->count(opt)) std::cerr << "note: " << opt << " ignored when --config is given\n";
      }
      spec.validate();
      const fs::path out = resolve_out(gen_out, "corpus.jsonl");
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      write_corpus_jsonl(out, corpus_records(generate_corpus(spec)));
      std::cout << out.string() << '\n';
      return 0;
    }
    if (*train) {
      const RunConfig rc = parse_run_config(read_json_file(train_config));
      const fs::path out = resolve_out(train_out, "run");
      const auto outcome = execute_run(rc, load_corpus(train_data), {}, resolve_workers(train_workers), keep_clients);
      write_run(out, outcome);
      std::cout << rc.name << " final_accuracy=" << fmt_double(outcome.result.final_accuracy()) << " -> " << out.string() << '\n';
      return 0;
    }
    if (*inf) {
      const auto ck = load_checkpoint(inf_ckpt);
      const auto lib = load_library(inf_lib);
      if (lib.classes != ck.config.num_classes || lib.dim != ck.config.dim)
        throw std::invalid_argument("library shape does not match checkpoint");
      auto test = test_split(inf_test);
      const auto drop_label = inf_drop;
      if (inf_drop == "image") test = drop_modality(std::move(test), Modality::Image);
      if (inf_drop == "text") test = drop_modality(std::move(test), Modality::Text);
      for (const auto& s : test)
        if (!s.has_image && !s.has_text) throw std::invalid_argument("sample " + std::to_string(s.id) + " has no modality left");

      InferenceSpec spec;
      spec.mask = parse_inference_mask(inf_mask);
      spec.mix.k = inf_k;
      spec.seed = inf_seed;
      const auto [kind, mode] = parse_matcher_arg(inf_matcher);
      std::vector<Matcher> trained;
      if (model_based(kind)) {
        if (inf_matchers_file.empty()) throw std::invalid_argument("--matchers is required for model-based matchers");
        trained = load_matchers(inf_matchers_file);
      }
      spec.image_matcher = pick_matcher(kind, mode, Family::Image, trained);
      spec.text_matcher = pick_matcher(kind, mode, Family::Text, trained);
      const auto result = infer_batch(ck.params, ck.config, test, lib, spec);

      nlohmann::json topk = nlohmann::json::object();
      if (spec.mask == InferenceMask::Prototype) {
        for (Family f : {Family::Image, Family::Text}) {
          const auto& m = f == Family::Image ? spec.image_matcher : spec.text_matcher;
          if (!m) continue;
          std::vector<MultimodalSample> single;
          for (const auto& s : test)
            if (!s.complete() && (f == Family::Image ? s.has_image : s.has_text)) single.push_back(s);
          if (single.empty()) continue;
          const auto mr = evaluate_matching(*m, family_representations(ck.params, ck.config, single, f), lib);
          nlohmann::json fam;
          for (std::size_t q = 0; q < mr.ks.size(); ++q) fam["top" + std::to_string(mr.ks[q])] = mr.accuracy[q];
          topk[family_name(f)] = fam;
        }
      }
      const nlohmann::json j = {{"accuracy", result.accuracy},
                                {"matching_topk", topk},
                                {"per_class_accuracy", result.per_class_accuracy},
                                {"mask", inf_mask},
                                {"matcher", inf_matcher},
                                {"mix_k", inf_k},
                                {"drop_modality", drop_label},
                                {"samples", test.size()},
                                {"complete", result.complete},
                                {"image_only", result.image_only},
                                {"text_only", result.text_only}};
      if (inf_out.empty()) {
        std::cout << j.dump(2) << '\n';
      } else {
        bytes::write_text(inf_out, j.dump(2) + "\n");
      }
      return 0;
    }
    if (*mat) {
      const auto spec = parse_experiment(read_json_file(mat_spec));
      const fs::path out = resolve_out(mat_out, "matrix");
      const auto res = run_matrix(spec, out, resolve_workers(mat_workers));
      if (!res.runs.empty()) std::cout << summary_markdown(res.table);
      for (const auto& f : res.failures)
        std::cerr << "cell failed: " << f.config << " rho=" << rho_key(f.rho_train) << " seed=" << f.seed << ": " << f.error << '\n';
      return res.complete() ? 0 : 1;
    }
    if (*rep) {
      std::vector<RunSummary> runs;
      std::set<fs::path> seen;
      for (const auto& d : rep_dirs)
        for (const auto& r : find_run_dirs(d))
          if (seen.insert(fs::weakly_canonical(r)).second) runs.push_back(read_run(r));
      if (runs.empty()) throw std::runtime_error("no completed runs found");
      const fs::path out = resolve_out(rep_out, "report");
      write_report(out, build_report(runs, named_configs()));
      std::cout << (out / "summary.md").string() << '\n';
      return 0;
    }
    if (*dump) {
      const auto ck = load_checkpoint(dump_ckpt);
      const auto rows = dump_representations(ck.params, ck.config, test_split(dump_test), dump_client);
      const fs::path out = resolve_out(dump_out, "representations.csv");
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      bytes::write_text(out, dump_csv(rows));
      std::cout << out.string() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
