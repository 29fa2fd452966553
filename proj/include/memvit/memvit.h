#ifndef MEMVIT_MEMVIT_H
#define MEMVIT_MEMVIT_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define MEMVIT_API __declspec(dllexport)
#else
#define MEMVIT_API __attribute__((visibility("default")))
#endif

typedef enum memvit_status {
  MEMVIT_OK = 0,
  MEMVIT_ERR_DIMENSION = 1,
  MEMVIT_ERR_CONTRACT = 2,
  MEMVIT_ERR_INDEX = 3,
  MEMVIT_ERR_USAGE = 4,
  MEMVIT_ERR_CONFIG = 5,
  MEMVIT_ERR_FORMAT = 6,
  MEMVIT_ERR_IO = 7,
  MEMVIT_ERR_FINGERPRINT = 8,
  MEMVIT_ERR_NOT_FOUND = 9,
  MEMVIT_ERR_INTERNAL = 10
} memvit_status;

typedef struct memvit_config memvit_config;    /* run configuration */
typedef struct memvit_dataset memvit_dataset;  /* images, labels and splits */
typedef struct memvit_model memvit_model;      /* backbone plus attached tasks and mask policy */
typedef struct memvit_pack memvit_pack;        /* one task's trainables */

/* Message of the last failed call on this thread; empty after success. */
MEMVIT_API const char* memvit_last_error(void);
MEMVIT_API const char* memvit_version(void);
/* Strings returned through char** out-parameters are released here. */
MEMVIT_API void memvit_string_free(char* s);

/* Configuration. NULL path or text yields the defaults. */
MEMVIT_API memvit_status memvit_config_load(const char* path, memvit_config** out);
MEMVIT_API memvit_status memvit_config_parse(const char* yaml_text, memvit_config** out);
MEMVIT_API void memvit_config_free(memvit_config* cfg);
MEMVIT_API memvit_status memvit_config_dump(const memvit_config* cfg, char** yaml_text);
/* Overrides; each re-validates the configuration. */
MEMVIT_API memvit_status memvit_config_set_seed(memvit_config* cfg, uint64_t seed);
MEMVIT_API memvit_status memvit_config_set_regime(memvit_config* cfg, const char* regime);
MEMVIT_API memvit_status memvit_config_set_mem_count(memvit_config* cfg, size_t m);
MEMVIT_API memvit_status memvit_config_set_policy(memvit_config* cfg, const char* policy);
MEMVIT_API memvit_status memvit_config_set_output_dir(memvit_config* cfg, const char* dir);
MEMVIT_API memvit_status memvit_config_set_task_name(memvit_config* cfg, const char* name);
MEMVIT_API memvit_status memvit_config_output_dir(const memvit_config* cfg, char** dir);

/* Data described by the configuration's data section. */
MEMVIT_API memvit_status memvit_dataset_create(const memvit_config* cfg, memvit_dataset** out);
MEMVIT_API void memvit_dataset_free(memvit_dataset* data);
MEMVIT_API memvit_status memvit_dataset_save(const memvit_dataset* data, const char* path);

/* Training. `log` (optional) receives the metric records, one per line. */
MEMVIT_API memvit_status memvit_pretrain(const memvit_config* cfg, const memvit_dataset* data, memvit_model** out,
                                         char** log);
MEMVIT_API memvit_status memvit_finetune(const memvit_config* cfg, const memvit_model* backbone,
                                         const memvit_dataset* data, memvit_model** out, char** log);
/* Trains one more task on an extension composite. */
MEMVIT_API memvit_status memvit_extend(const memvit_config* cfg, const memvit_model* composite,
                                       const memvit_dataset* data, memvit_model** out, char** log);

/* Models and packs. run_config (optional) is stored in the manifest. */
MEMVIT_API memvit_status memvit_model_load(const char* path, memvit_model** out);
MEMVIT_API memvit_status memvit_model_save(const memvit_model* model, const char* path, const char* run_config);
MEMVIT_API void memvit_model_free(memvit_model* model);
MEMVIT_API memvit_status memvit_model_num_tasks(const memvit_model* model, size_t* count);
MEMVIT_API memvit_status memvit_model_task_name(const memvit_model* model, size_t index, char** name);
/* Backbone fingerprint, 64 hex characters. */
MEMVIT_API memvit_status memvit_model_fingerprint(const memvit_model* model, char** hex);
MEMVIT_API memvit_status memvit_model_extract_pack(const memvit_model* model, const char* task_name,
                                                   memvit_pack** out);
MEMVIT_API memvit_status memvit_pack_load(const char* path, memvit_pack** out);
MEMVIT_API memvit_status memvit_pack_save(const memvit_pack* pack, const char* path, const char* run_config);
MEMVIT_API void memvit_pack_free(memvit_pack* pack);

/* Composition. policy is "concatenation" or "extension". */
MEMVIT_API memvit_status memvit_compose(const memvit_model* base, const memvit_pack* const* packs, size_t count,
                                        const char* policy, memvit_model** out);
/* Per-head maximum absolute logit deviation from the standalone references
   on the first `probe_size` test images. */
MEMVIT_API memvit_status memvit_preservation_report(const memvit_model* composite, const memvit_dataset* data,
                                                    size_t probe_size, char** report, double* max_deviation);

/* Reports. */
MEMVIT_API memvit_status memvit_eval_report(const memvit_model* model, const memvit_dataset* data, char** report);
MEMVIT_API memvit_status memvit_evaluate(const memvit_model* model, const memvit_dataset* data, const char* head,
                                         double* accuracy);
MEMVIT_API memvit_status memvit_inspect_file(const char* path, char** report);
/* NULL mem_count or num_classes takes train.mem_count or model.num_classes. */
MEMVIT_API memvit_status memvit_flops_report(const memvit_config* cfg, const size_t* mem_count,
                                             const size_t* num_classes, char** report);
MEMVIT_API memvit_status memvit_gradcheck(uint64_t seed, char** report, double* max_rel_error);

/* Experiment drivers. Each run's metric log and a summary table are written
   under out_dir; the summary is also returned. */
MEMVIT_API memvit_status memvit_sweep(const memvit_config* cfg, const memvit_model* backbone,
                                      const memvit_dataset* data, const char* out_dir, char** summary);
MEMVIT_API memvit_status memvit_ablate(const memvit_config* cfg, const memvit_model* backbone,
                                       const memvit_dataset* data, const char* out_dir, char** summary);

#ifdef __cplusplus
}
#endif

#endif
