#include "abc/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// The CLI prints help and errors to the real streams; keep test output clean
// and capture stderr for assertions about error text.
struct Capture {
  std::ostringstream out, err;
  std::streambuf* old_out;
  std::streambuf* old_err;
  Capture()
      : old_out(std::cout.rdbuf(out.rdbuf())), old_err(std::cerr.rdbuf(err.rdbuf())) {}
  ~Capture() {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
  }
};

int cli(const std::vector<std::string>& args, std::string* err_text = nullptr) {
  Capture cap;
  int rc = abc::run_cli(args);
  if (err_text) *err_text = cap.err.str();
  return rc;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "abc-cli-tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put(const fs::path& path, const json& config) {
  std::ofstream os(path);
  os << config.dump(2);
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE_MESSAGE(is.good(), "missing file: ", path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json jload(const fs::path& path) { return json::parse(slurp(path)); }

json small_encoder() {
  return {{"d_model", 16}, {"n_layers", 1}, {"n_heads", 2}};
}

json meta_without_walltime(const fs::path& dir) {
  json m = jload(dir / "run_meta.json");
  REQUIRE(m.contains("wall_time_s"));
  m.erase("wall_time_s");
  return m;
}

}  // namespace

TEST_CASE("usage problems exit with code 2") {
  CHECK(cli({}) == 2);
  CHECK(cli({"frobnicate", "--config", "x.json", "--out", "y"}) == 2);
  CHECK(cli({"gen-world"}) == 2);  // --config and --out are required
  CHECK(cli({"gen-world", "--config", "x.json", "--out", "y", "--bogus-flag"}) == 2);
  CHECK(cli({"gen-world", "--help"}) == 0);
  CHECK(cli({"--help"}) == 0);
}

TEST_CASE("config content problems exit with code 3 and name the field") {
  fs::path dir = fresh_dir("badcfg");
  std::string err;

  put(dir / "unknown.json", {{"n_images", 8}, {"typo_field", 3}});
  CHECK(cli({"gen-world", "--config", (dir / "unknown.json").string(), "--out",
             (dir / "w").string()},
            &err) == 3);
  CHECK(err.find("world.typo_field") != std::string::npos);

  put(dir / "badtype.json", {{"n_images", "many"}});
  CHECK(cli({"gen-world", "--config", (dir / "badtype.json").string(), "--out",
             (dir / "w").string()},
            &err) == 3);
  CHECK(err.find("world.n_images") != std::string::npos);

  put(dir / "negative.json", {{"n_images", -5}});
  CHECK(cli({"gen-world", "--config", (dir / "negative.json").string(), "--out",
             (dir / "w").string()}) == 3);

  // Section errors surface before any input is touched: no corpus exists here.
  put(dir / "badattn.json",
      {{"corpus", (dir / "nowhere").string()},
       {"encoder", {{"attn_mode", "diagonal"}}}});
  CHECK(cli({"bootstrap", "--config", (dir / "badattn.json").string(), "--out",
             (dir / "b").string()},
            &err) == 3);
  CHECK(err.find("encoder.attn_mode") != std::string::npos);

  put(dir / "nocorpus.json", {{"train", {{"steps", 1}}}});
  CHECK(cli({"bootstrap", "--config", (dir / "nocorpus.json").string(), "--out",
             (dir / "b").string()},
            &err) == 3);
  CHECK(err.find("config.corpus") != std::string::npos);

  {
    std::ofstream os(dir / "mangled.json");
    os << "{ this is not json";
  }
  CHECK(cli({"gen-world", "--config", (dir / "mangled.json").string(), "--out",
             (dir / "w").string()}) == 3);

  CHECK(cli({"gen-world", "--config", (dir / "does-not-exist.json").string(), "--out",
             (dir / "w").string()}) == 3);
}

TEST_CASE("missing inputs are runtime failures, not config errors") {
  fs::path dir = fresh_dir("noinput");
  put(dir / "boot.json",
      {{"corpus", (dir / "no-such-corpus").string()},
       {"encoder", small_encoder()},
       {"train", {{"steps", 1}, {"batch_queries", 2}, {"batch_candidates", 2}}}});
  std::string err;
  CHECK(cli({"bootstrap", "--config", (dir / "boot.json").string(), "--out",
             (dir / "b").string()},
            &err) == 1);
  CHECK(err.find("[error] bootstrap") != std::string::npos);
}

TEST_CASE("generation and training are deterministic; --seed overrides the config") {
  fs::path dir = fresh_dir("determinism");
  put(dir / "world.json",
      {{"n_images", 12}, {"n_aspects", 3}, {"n_bench_images", 2}, {"seed", 11}});

  REQUIRE(cli({"gen-world", "--config", (dir / "world.json").string(), "--out",
               (dir / "w1").string()}) == 0);
  REQUIRE(cli({"gen-world", "--config", (dir / "world.json").string(), "--out",
               (dir / "w2").string()}) == 0);
  for (const char* f : {"images.jsonl", "captions.jsonl", "instructions.jsonl",
                        "ctrlbench.jsonl"})
    CHECK(slurp(dir / "w1" / f) == slurp(dir / "w2" / f));
  CHECK(meta_without_walltime(dir / "w1") == meta_without_walltime(dir / "w2"));

  REQUIRE(cli({"gen-world", "--config", (dir / "world.json").string(), "--out",
               (dir / "w99").string(), "--seed", "99"}) == 0);
  CHECK(slurp(dir / "w99" / "images.jsonl") != slurp(dir / "w1" / "images.jsonl"));
  CHECK(jload(dir / "w99" / "run_meta.json")["seed"] == 99);
  CHECK(jload(dir / "w99" / "run_meta.json")["config"]["seed"] == 99);

  json boot = {{"corpus", (dir / "w1").string()},
               {"encoder", small_encoder()},
               {"train",
                {{"steps", 12},
                 {"batch_queries", 4},
                 {"batch_candidates", 4},
                 {"lora_rank", 2},
                 {"lora_alpha", 4.0},
                 {"eval_every", 6},
                 {"seed", 3}}}};
  put(dir / "boot.json", boot);
  REQUIRE(cli({"bootstrap", "--config", (dir / "boot.json").string(), "--out",
               (dir / "b1").string()}) == 0);
  REQUIRE(cli({"bootstrap", "--config", (dir / "boot.json").string(), "--out",
               (dir / "b2").string()}) == 0);
  CHECK(slurp(dir / "b1" / "boot.abce") == slurp(dir / "b2" / "boot.abce"));
  CHECK(slurp(dir / "b1" / "metrics.jsonl") == slurp(dir / "b2" / "metrics.jsonl"));
  CHECK(meta_without_walltime(dir / "b1") == meta_without_walltime(dir / "b2"));

  REQUIRE(cli({"bootstrap", "--config", (dir / "boot.json").string(), "--out",
               (dir / "b8").string(), "--seed", "8"}) == 0);
  CHECK(slurp(dir / "b8" / "boot.abce") != slurp(dir / "b1" / "boot.abce"));
  CHECK(jload(dir / "b8" / "run_meta.json")["config"]["train"]["seed"] == 8);
}

TEST_CASE("the full pipeline runs end to end through the command line") {
  fs::path dir = fresh_dir("chain");
  std::string err;

  put(dir / "world.json",
      {{"n_images", 16}, {"n_aspects", 4}, {"n_bench_images", 3}, {"seed", 21}});
  REQUIRE(cli({"gen-world", "--config", (dir / "world.json").string(), "--out",
               (dir / "world").string()}) == 0);
  REQUIRE(fs::exists(dir / "world" / "ctrlbench.jsonl"));

  put(dir / "boot.json",
      {{"corpus", (dir / "world").string()},
       {"encoder", small_encoder()},
       {"train",
        {{"steps", 25},
         {"batch_queries", 8},
         {"batch_candidates", 8},
         {"lora_rank", 2},
         {"lora_alpha", 4.0},
         {"eval_every", 10},
         {"seed", 3}}}});
  REQUIRE(cli({"bootstrap", "--config", (dir / "boot.json").string(), "--out",
               (dir / "boot").string()}) == 0);

  // File-mode output: --out names the .jsonl itself, run metadata lands
  // beside it.
  put(dir / "mine.json",
      {{"corpus", (dir / "world").string()},
       {"model", (dir / "boot" / "boot.abce").string()},
       {"k", 3},
       {"seed", 4}});
  REQUIRE(cli({"mine", "--config", (dir / "mine.json").string(), "--out",
               (dir / "mined.jsonl").string(), "--allow-fewer"}) == 0);
  REQUIRE(fs::exists(dir / "mined.jsonl"));
  CHECK(jload(dir / "run_meta.json")["command"] == "mine");

  // Directory-mode output for the same mining run.
  REQUIRE(cli({"mine", "--config", (dir / "mine.json").string(), "--out",
               (dir / "minedir").string(), "--allow-fewer"}) == 0);
  CHECK(slurp(dir / "minedir" / "mined.jsonl") == slurp(dir / "mined.jsonl"));

  put(dir / "pretrain.json",
      {{"corpus", (dir / "world").string()},
       {"mined", (dir / "mined.jsonl").string()},
       {"encoder", small_encoder()},
       {"train",
        {{"steps", 30},
         {"batch_queries", 4},
         {"batch_candidates", 16},
         {"lora_rank", 2},
         {"lora_alpha", 4.0},
         {"eval_every", 15},
         {"seed", 5}}}});
  REQUIRE(cli({"pretrain", "--config", (dir / "pretrain.json").string(), "--out",
               (dir / "s1").string()}) == 0);

  // The mining scorer must come from the warm-up run, not a later stage.
  REQUIRE(cli({"mine", "--config", (dir / "mine.json").string(), "--out",
               (dir / "minedir2").string(), "--allow-fewer", "--model",
               (dir / "s1" / "stage1.abce").string()},
              &err) == 1);
  CHECK(err.find("warm-up") != std::string::npos);

  put(dir / "finetune.json",
      {{"corpus", (dir / "world").string()},
       {"stage1", (dir / "s1" / "stage1.abce").string()},
       {"train",
        {{"steps", 12},
         {"images_per_batch", 4},
         {"group_size", 2},
         {"lora_rank", 2},
         {"lora_alpha", 4.0},
         {"eval_every", 6},
         {"seed", 6}}}});
  REQUIRE(cli({"finetune", "--config", (dir / "finetune.json").string(), "--out",
               (dir / "s2").string()}) == 0);

  put(dir / "bench.json",
      {{"corpus", (dir / "world").string()},
       {"ckpt", (dir / "s2" / "stage2.abce").string()},
       {"bench", (dir / "world" / "ctrlbench.jsonl").string()},
       {"ks", {1, 3}}});
  REQUIRE(cli({"eval-ctrlbench", "--config", (dir / "bench.json").string(), "--out",
               (dir / "bench").string()}) == 0);
  json inst = jload(dir / "bench" / "ctrlbench_instructed.json");
  json blind = jload(dir / "bench" / "ctrlbench_blind.json");
  CHECK(inst["n_queries"] == 12);  // 3 bench images x 4 aspects
  CHECK(inst["metrics"].contains("R@1"));
  CHECK(inst["metrics"].contains("within_image_R@1"));
  // Without instructions every query of an image ranks the pool identically,
  // so exactly one of the image's aspects can land on top.
  CHECK(blind["metrics"]["within_image_R@1"] == 0.25);
  REQUIRE(fs::exists(dir / "bench" / "ctrlbench_instructed_ranks.jsonl"));

  put(dir / "retr.json", {{"corpus", (dir / "world").string()},
                          {"ckpt", (dir / "s1" / "stage1.abce").string()},
                          {"ks", {1, 5}}});
  REQUIRE(cli({"eval-retrieval", "--config", (dir / "retr.json").string(), "--out",
               (dir / "retr").string()}) == 0);
  json i2t = jload(dir / "retr" / "retrieval_i2t.json");
  CHECK(i2t["task"] == "retrieval/image-to-text");
  CHECK(jload(dir / "retr" / "run_meta.json")["seed"].is_null());

  put(dir / "retrbad.json", {{"corpus", (dir / "world").string()},
                             {"ckpt", (dir / "s1" / "stage1.abce").string()},
                             {"ks", {1, 1000}}});
  CHECK(cli({"eval-retrieval", "--config", (dir / "retrbad.json").string(), "--out",
             (dir / "retrbad").string()},
            &err) == 3);
  CHECK(err.find("ks") != std::string::npos);

  put(dir / "cls.json", {{"corpus", (dir / "world").string()},
                         {"ckpt", (dir / "s1" / "stage1.abce").string()},
                         {"aspect", 1}});
  REQUIRE(cli({"eval-classify", "--config", (dir / "cls.json").string(), "--out",
               (dir / "cls").string()}) == 0);
  CHECK(jload(dir / "cls" / "classification.json")["metrics"].contains("accuracy"));

  put(dir / "clsbad.json", {{"corpus", (dir / "world").string()},
                            {"ckpt", (dir / "s1" / "stage1.abce").string()},
                            {"aspect", 99}});
  CHECK(cli({"eval-classify", "--config", (dir / "clsbad.json").string(), "--out",
             (dir / "clsbad").string()}) == 3);

  put(dir / "validate.json", {{"corpus", (dir / "world").string()},
                              {"mined", (dir / "mined.jsonl").string()},
                              {"bench", (dir / "world" / "ctrlbench.jsonl").string()}});
  REQUIRE(cli({"validate", "--config", (dir / "validate.json").string(), "--out",
               (dir / "val").string()}) == 0);
  CHECK(jload(dir / "val" / "validation.json")["ok"] == true);

  // Tightening the mining threshold after the fact must flag the dataset.
  put(dir / "validate0.json", {{"corpus", (dir / "world").string()},
                               {"mined", (dir / "mined.jsonl").string()},
                               {"epsilon", 0.0}});
  CHECK(cli({"validate", "--config", (dir / "validate0.json").string(), "--out",
             (dir / "val0").string()}) == 1);
  json v0 = jload(dir / "val0" / "validation.json");
  CHECK(v0["ok"] == false);
  CHECK(v0["checked"]["mined"] == false);
}

TEST_CASE("experiment commands produce their report files") {
  fs::path dir = fresh_dir("experiments");
  put(dir / "world.json",
      {{"n_images", 12}, {"n_aspects", 3}, {"n_bench_images", 2}, {"seed", 31}});
  REQUIRE(cli({"gen-world", "--config", (dir / "world.json").string(), "--out",
               (dir / "world").string()}) == 0);
  put(dir / "boot.json",
      {{"corpus", (dir / "world").string()},
       {"encoder", small_encoder()},
       {"train",
        {{"steps", 10}, {"batch_queries", 4}, {"batch_candidates", 4},
         {"lora_rank", 2}, {"lora_alpha", 4.0}, {"eval_every", 5}, {"seed", 3}}}});
  REQUIRE(cli({"bootstrap", "--config", (dir / "boot.json").string(), "--out",
               (dir / "boot").string()}) == 0);
  put(dir / "mine.json", {{"corpus", (dir / "world").string()},
                          {"model", (dir / "boot" / "boot.abce").string()},
                          {"k", 2},
                          {"seed", 4}});
  REQUIRE(cli({"mine", "--config", (dir / "mine.json").string(), "--out",
               (dir / "mined.jsonl").string(), "--allow-fewer"}) == 0);

  // Each query faces batch_candidates / batch_queries - 1 = 2 mined negatives.
  json train = {{"steps", 6},       {"batch_queries", 2}, {"batch_candidates", 6},
                {"lora_rank", 2},   {"lora_alpha", 4.0},  {"eval_every", 3},
                {"seed", 5}};
  json base = {{"corpus", (dir / "world").string()},
               {"mined", (dir / "mined.jsonl").string()},
               {"encoder", small_encoder()},
               {"train", train}};

  json tau_cfg = base;
  tau_cfg["seeds"] = {1};
  put(dir / "tau.json", tau_cfg);
  REQUIRE(cli({"exp-tau", "--config", (dir / "tau.json").string(), "--out",
               (dir / "tau").string()}) == 0);
  json tau = jload(dir / "tau" / "tau_experiment.json");
  REQUIRE(tau["runs"].size() == 1);
  CHECK(tau["runs"][0]["tau_mined"].size() == 6);
  CHECK(tau["runs"][0]["tau_random"].size() == 6);

  json arch_cfg = base;
  arch_cfg["ranks"] = {2};
  put(dir / "arch.json", arch_cfg);
  REQUIRE(cli({"exp-arch", "--config", (dir / "arch.json").string(), "--out",
               (dir / "arch").string()}) == 0);
  json arch = jload(dir / "arch" / "arch_ablation.json");
  REQUIRE(arch["rows"].size() == 2);  // two attention modes x one rank
  CHECK(arch["rows"][0]["attn_mode"] == "causal");
  CHECK(arch["rows"][1]["attn_mode"] == "bidirectional");

  put(dir / "scaling.json", base);
  REQUIRE(cli({"exp-scaling", "--config", (dir / "scaling.json").string(), "--out",
               (dir / "scaling").string()}) == 0);
  json scaling = jload(dir / "scaling" / "scaling.json");
  REQUIRE(scaling["rows"].size() == 4);
  CHECK(scaling["rows"][0]["label"] == "4x-batch");
  CHECK(scaling["rows"][3]["samples_seen"] == scaling["rows"][0]["samples_seen"]);
  CHECK(scaling.contains("direction"));

  // Full-scale presets stay loadable; config overrides keep the run desk-sized.
  json paper_boot = {{"corpus", (dir / "world").string()},
                     {"encoder", small_encoder()},
                     {"train",
                      {{"steps", 2},
                       {"batch_queries", 4},
                       {"batch_candidates", 4},
                       {"lora_rank", 2},
                       {"lora_alpha", 4.0},
                       {"eval_every", 2},
                       {"seed", 3}}}};
  put(dir / "paperboot.json", paper_boot);
  REQUIRE(cli({"bootstrap", "--config", (dir / "paperboot.json").string(), "--out",
               (dir / "paperboot").string(), "--paper-scale"}) == 0);
  json meta = jload(dir / "paperboot" / "run_meta.json");
  CHECK(meta["config"]["train"]["lr"] == 4e-5);
  CHECK(meta["config"]["train"]["steps"] == 2);
}
