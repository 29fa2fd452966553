#include <gtest/gtest.h>
#include <memvit/memvit.h>

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

namespace fs = std::filesystem;

namespace {

const char* k_tiny = R"(
model: {image_size: 16, patch_size: 4, depth: 2, width: 16, heads: 2, mlp_ratio: 2, num_classes: 3}
data: {image_size: 16, num_classes: 3, samples_per_class: 20, freq_max: 4}
train: {total_steps: 20, eval_interval: 10, batch_size: 8, mem_count: 2, train_eval_samples: 16, grad_clip_norm: 1}
sweep: {learning_rates: [0.1], mem_counts: [1], regimes: [head_only, memory_masked], layer_counts: [0, 2]}
)";

struct Deleter {
  void operator()(memvit_config* p) const { memvit_config_free(p); }
  void operator()(memvit_dataset* p) const { memvit_dataset_free(p); }
  void operator()(memvit_model* p) const { memvit_model_free(p); }
  void operator()(memvit_pack* p) const { memvit_pack_free(p); }
  void operator()(char* p) const { memvit_string_free(p); }
};
template <typename T>
using Owned = std::unique_ptr<T, Deleter>;

std::string take(char* s) {
  Owned<char> o(s);
  return s ? std::string(s) : std::string();
}

Owned<memvit_config> tiny_config() {
  memvit_config* c = nullptr;
  EXPECT_EQ(memvit_config_parse(k_tiny, &c), MEMVIT_OK) << memvit_last_error();
  return Owned<memvit_config>(c);
}

Owned<memvit_dataset> data_of(const memvit_config* c) {
  memvit_dataset* d = nullptr;
  EXPECT_EQ(memvit_dataset_create(c, &d), MEMVIT_OK) << memvit_last_error();
  return Owned<memvit_dataset>(d);
}

struct Trained {
  Owned<memvit_config> cfg;
  Owned<memvit_dataset> data;
  Owned<memvit_model> backbone;
};

const Trained& trained() {
  static Trained t = [] {
    Trained r{tiny_config(), nullptr, nullptr};
    r.data = data_of(r.cfg.get());
    memvit_model* m = nullptr;
    EXPECT_EQ(memvit_pretrain(r.cfg.get(), r.data.get(), &m, nullptr), MEMVIT_OK) << memvit_last_error();
    r.backbone.reset(m);
    return r;
  }();
  return t;
}

Owned<memvit_model> finetune_task(const char* name, std::uint64_t seed) {
  auto cfg = tiny_config();
  memvit_config_set_task_name(cfg.get(), name);
  memvit_config_set_seed(cfg.get(), seed);
  memvit_model* m = nullptr;
  char* log = nullptr;
  EXPECT_EQ(memvit_finetune(cfg.get(), trained().backbone.get(), trained().data.get(), &m, &log), MEMVIT_OK)
      << memvit_last_error();
  EXPECT_NE(take(log).find("split=test"), std::string::npos);
  return Owned<memvit_model>(m);
}

Owned<memvit_pack> pack_of(const memvit_model* m, const char* name) {
  memvit_pack* p = nullptr;
  EXPECT_EQ(memvit_model_extract_pack(m, name, &p), MEMVIT_OK) << memvit_last_error();
  return Owned<memvit_pack>(p);
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "memvit_capi_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(CApi, VersionAndNullArguments) {
  EXPECT_NE(std::string(memvit_version()), "");
  EXPECT_EQ(memvit_config_parse(nullptr, nullptr), MEMVIT_ERR_USAGE);
  EXPECT_NE(std::string(memvit_last_error()).find("memvit_config_parse"), std::string::npos);
  memvit_config_free(nullptr);
  memvit_string_free(nullptr);
}

TEST(CApi, SuccessClearsTheLastError) {
  EXPECT_EQ(memvit_model_load(nullptr, nullptr), MEMVIT_ERR_USAGE);
  EXPECT_STRNE(memvit_last_error(), "");
  auto c = tiny_config();
  EXPECT_STREQ(memvit_last_error(), "");
}

TEST(CApi, ConfigErrorsCarryLineAndField) {
  memvit_config* c = nullptr;
  EXPECT_EQ(memvit_config_parse("train:\n  bogus: 1\n", &c), MEMVIT_ERR_CONFIG);
  EXPECT_EQ(c, nullptr);
  const std::string msg = memvit_last_error();
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("train.bogus"), std::string::npos) << msg;
  EXPECT_EQ(memvit_config_load("/nonexistent/run.yaml", &c), MEMVIT_ERR_IO);
}

TEST(CApi, SettersValidateAndRoundTrip) {
  auto c = tiny_config();
  EXPECT_EQ(memvit_config_set_regime(c.get(), "everything"), MEMVIT_ERR_CONFIG);
  EXPECT_EQ(memvit_config_set_policy(c.get(), "sideways"), MEMVIT_ERR_CONFIG);
  ASSERT_EQ(memvit_config_set_regime(c.get(), "head_cls"), MEMVIT_OK);
  ASSERT_EQ(memvit_config_set_policy(c.get(), "extension"), MEMVIT_OK);
  ASSERT_EQ(memvit_config_set_output_dir(c.get(), "out/here"), MEMVIT_OK);
  char* text = nullptr;
  ASSERT_EQ(memvit_config_dump(c.get(), &text), MEMVIT_OK);
  const auto yaml = take(text);
  EXPECT_NE(yaml.find("regime: head_cls"), std::string::npos);
  EXPECT_NE(yaml.find("policy: extension"), std::string::npos);

  memvit_config* back = nullptr;
  ASSERT_EQ(memvit_config_parse(yaml.c_str(), &back), MEMVIT_OK);
  Owned<memvit_config> owned(back);
  char* again = nullptr;
  ASSERT_EQ(memvit_config_dump(back, &again), MEMVIT_OK);
  EXPECT_EQ(take(again), yaml);
  char* dir = nullptr;
  ASSERT_EQ(memvit_config_output_dir(back, &dir), MEMVIT_OK);
  EXPECT_EQ(take(dir), "out/here");
}

TEST(CApi, ModelSaveLoadKeepsTheFingerprint) {
  const auto path = scratch("backbone.mvck");
  ASSERT_EQ(memvit_model_save(trained().backbone.get(), path.c_str(), k_tiny), MEMVIT_OK) << memvit_last_error();
  memvit_model* loaded = nullptr;
  ASSERT_EQ(memvit_model_load(path.c_str(), &loaded), MEMVIT_OK) << memvit_last_error();
  Owned<memvit_model> owned(loaded);
  char *a = nullptr, *b = nullptr;
  ASSERT_EQ(memvit_model_fingerprint(trained().backbone.get(), &a), MEMVIT_OK);
  ASSERT_EQ(memvit_model_fingerprint(loaded, &b), MEMVIT_OK);
  const auto fa = take(a);
  EXPECT_EQ(fa.size(), 64u);
  EXPECT_EQ(fa, take(b));
  size_t n = 9;
  ASSERT_EQ(memvit_model_num_tasks(loaded, &n), MEMVIT_OK);
  EXPECT_EQ(n, 0u);
  char* name = nullptr;
  EXPECT_EQ(memvit_model_task_name(loaded, 0, &name), MEMVIT_ERR_INDEX);
}

TEST(CApi, LoadErrorsAreTyped) {
  memvit_model* m = nullptr;
  EXPECT_EQ(memvit_model_load("/nonexistent/model.mvck", &m), MEMVIT_ERR_IO);
  const auto junk = scratch("junk.mvck");
  std::ofstream(junk) << "not a checkpoint";
  EXPECT_EQ(memvit_model_load(junk.c_str(), &m), MEMVIT_ERR_FORMAT);
  EXPECT_EQ(m, nullptr);
}

TEST(CApi, ComposedPacksMatchTheirStandaloneModels) {
  auto a = finetune_task("alpha", 3);
  auto b = finetune_task("beta", 4);
  char* name = nullptr;
  ASSERT_EQ(memvit_model_task_name(a.get(), 0, &name), MEMVIT_OK);
  EXPECT_EQ(take(name), "alpha");
  memvit_pack* missing = nullptr;
  EXPECT_EQ(memvit_model_extract_pack(a.get(), "gamma", &missing), MEMVIT_ERR_NOT_FOUND);

  auto pa = pack_of(a.get(), "alpha");
  const auto path = scratch("alpha.mvck");
  ASSERT_EQ(memvit_pack_save(pa.get(), path.c_str(), k_tiny), MEMVIT_OK);
  memvit_pack* loaded = nullptr;
  ASSERT_EQ(memvit_pack_load(path.c_str(), &loaded), MEMVIT_OK) << memvit_last_error();
  Owned<memvit_pack> pa2(loaded);
  auto pb = pack_of(b.get(), "beta");

  const memvit_pack* packs[] = {pa2.get(), pb.get()};
  memvit_model* comp = nullptr;
  ASSERT_EQ(memvit_compose(trained().backbone.get(), packs, 2, "concatenation", &comp), MEMVIT_OK)
      << memvit_last_error();
  Owned<memvit_model> composite(comp);
  size_t n = 0;
  ASSERT_EQ(memvit_model_num_tasks(comp, &n), MEMVIT_OK);
  EXPECT_EQ(n, 2u);

  char* report = nullptr;
  double dev = -1;
  ASSERT_EQ(memvit_preservation_report(comp, trained().data.get(), 16, &report, &dev), MEMVIT_OK)
      << memvit_last_error();
  EXPECT_NE(take(report).find("beta"), std::string::npos);
  EXPECT_EQ(dev, 0.0);

  double acc = -1;
  ASSERT_EQ(memvit_evaluate(comp, trained().data.get(), "alpha", &acc), MEMVIT_OK);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_EQ(memvit_evaluate(comp, trained().data.get(), "gamma", &acc), MEMVIT_ERR_NOT_FOUND);
  ASSERT_EQ(memvit_eval_report(comp, trained().data.get(), &report), MEMVIT_OK);
  EXPECT_NE(take(report).find("alpha"), std::string::npos);

  EXPECT_EQ(memvit_compose(trained().backbone.get(), packs, 2, "full", &comp), MEMVIT_ERR_CONFIG);
}

TEST(CApi, ForeignBackboneIsAFingerprintError) {
  auto a = finetune_task("alpha", 3);
  auto pa = pack_of(a.get(), "alpha");
  auto other_cfg = tiny_config();
  ASSERT_EQ(memvit_config_set_seed(other_cfg.get(), 99), MEMVIT_OK);
  memvit_model* other = nullptr;
  ASSERT_EQ(memvit_pretrain(other_cfg.get(), trained().data.get(), &other, nullptr), MEMVIT_OK) << memvit_last_error();
  Owned<memvit_model> other_owned(other);
  const memvit_pack* packs[] = {pa.get()};
  memvit_model* comp = nullptr;
  EXPECT_EQ(memvit_compose(other, packs, 1, "concatenation", &comp), MEMVIT_ERR_FINGERPRINT);
  EXPECT_EQ(comp, nullptr);
  EXPECT_NE(std::string(memvit_last_error()).find("alpha"), std::string::npos) << memvit_last_error();
}

TEST(CApi, ReportsAndGradcheck) {
  auto cfg = tiny_config();
  char* report = nullptr;
  const size_t m = 4, k = 3;
  ASSERT_EQ(memvit_flops_report(cfg.get(), &m, &k, &report), MEMVIT_OK) << memvit_last_error();
  EXPECT_FALSE(take(report).empty());
  ASSERT_EQ(memvit_flops_report(cfg.get(), nullptr, nullptr, &report), MEMVIT_OK);
  take(report);

  double worst = 1;
  ASSERT_EQ(memvit_gradcheck(1, &report, &worst), MEMVIT_OK);
  EXPECT_NE(take(report).find("worst"), std::string::npos);
  EXPECT_LT(worst, 1e-4);

  const auto path = scratch("inspect.mvck");
  ASSERT_EQ(memvit_model_save(trained().backbone.get(), path.c_str(), k_tiny), MEMVIT_OK);
  ASSERT_EQ(memvit_inspect_file(path.c_str(), &report), MEMVIT_OK);
  EXPECT_NE(take(report).find("fingerprint"), std::string::npos);
}

TEST(CApi, SweepAndAblateWriteLogsAndSummary) {
  const auto dir = scratch("sweep");
  fs::remove_all(dir);
  char* summary = nullptr;
  ASSERT_EQ(memvit_sweep(trained().cfg.get(), trained().backbone.get(), trained().data.get(), dir.c_str(), &summary),
            MEMVIT_OK)
      << memvit_last_error();
  EXPECT_NE(take(summary).find("memory_masked"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "summary.txt"));
  EXPECT_TRUE(fs::exists(dir / "head_only_m0_per_layer_none_lr0.1.log"));

  const auto adir = scratch("ablate");
  fs::remove_all(adir);
  ASSERT_EQ(memvit_ablate(trained().cfg.get(), trained().backbone.get(), trained().data.get(), adir.c_str(), &summary),
            MEMVIT_OK)
      << memvit_last_error();
  EXPECT_NE(take(summary).find("propagated_added"), std::string::npos);
  EXPECT_TRUE(fs::exists(adir / "summary.txt"));
}
