#include "toy_models.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>

#include <json.hpp>

#include "icl_lab/model_io.hpp"
#include "icl_lab/rng.hpp"

namespace icl::test {

namespace fs = std::filesystem;

namespace {

SyntheticTaskSpec world_spec(ToyWorld world, std::uint64_t seed) {
  return world == ToyWorld::kAmbiguous ? SyntheticTaskSpec::ambiguous(seed) : SyntheticTaskSpec::facts(seed);
}

}  // namespace

PretrainConfig toy_pretrain_config(ToyWorld, std::uint64_t seed) {
  PretrainConfig pc;
  pc.seed = seed;
  // The loss plateaus by about 1800 steps on both worlds.
  pc.steps = 2000;
  return pc;
}

fs::path cache_dir() {
  if (const char* env = std::getenv("ICL_LAB_CACHE_DIR"); env && *env) return env;
  return ICL_LAB_CACHE_DIR;
}

ToyModel toy_model(ToyWorld world, std::uint64_t seed) {
  const auto spec = world_spec(world, seed);
  const auto pc = toy_pretrain_config(world, seed);
  const ModelConfig cfg;
  const nlohmann::ordered_json recipe = {
      {"world", spec_to_json(spec)},
      {"model", {cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_seq}},
      {"pretrain",
       {pc.steps, pc.batch, pc.learning_rate, pc.beta1, pc.beta2, pc.clip_norm, pc.corpus.max_shots,
        pc.corpus.instruction_prob, pc.corpus.distractor_prob}},
  };
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(recipe.dump())));
  const auto name = std::string(world == ToyWorld::kAmbiguous ? "ambiguous" : "facts") + "_s" + std::to_string(seed) +
                    "_" + hash + ".twb";
  ToyModel out;
  out.path = cache_dir() / name;
  if (fs::exists(out.path)) return out;

  fs::create_directories(cache_dir());
  std::fprintf(stderr, "pretraining %s (seed %llu, %d steps)...\n", name.c_str(),
               static_cast<unsigned long long>(seed), pc.steps);
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = pretrain_toy(cfg, gen_synthetic(spec), pc);
  out.trained_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  // Write then rename so an interrupted run never leaves a truncated model.
  const auto tmp = fs::path(out.path).concat(".tmp");
  save_model(model, tmp);
  fs::rename(tmp, out.path);
  return out;
}

}  // namespace icl::test
