#ifndef RFM_LAB_H
#define RFM_LAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of a call.
 */
typedef enum RfmStatus {
  RFM_STATUS_OK = 0,
  RFM_STATUS_NULL_POINTER = 1,
  RFM_STATUS_INVALID_ARGUMENT = 2,
  RFM_STATUS_DIMENSION = 3,
  RFM_STATUS_INDEX = 4,
  RFM_STATUS_STATE = 5,
  RFM_STATUS_NUMERIC = 6,
  RFM_STATUS_PARSE = 7,
  RFM_STATUS_FORMAT = 8,
  RFM_STATUS_IO = 9,
  RFM_STATUS_BUFFER_TOO_SMALL = 10,
  RFM_STATUS_PANIC = 11,
} RfmStatus;

/*
 A loaded dataset.
 */
typedef struct RfmDataset RfmDataset;

/*
 A running environment and the agents' latest actions.
 */
typedef struct RfmEnv RfmEnv;

/*
 A trained model with its recurrent state.
 */
typedef struct RfmModel RfmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *rfm_version(void);

/*
 Width of one vertex feature row.
 */
size_t rfm_vertex_dim(void);

/*
 Copies the calling thread's last error message into `buf` (truncated,
 always NUL-terminated when `len > 0`). Returns the full message length
 plus one for the terminator.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t rfm_last_error(char *buf, size_t len);

/*
 Creates an environment for `game` (`coopnav`, `coin`, `staghunt2`,
 `staghunt4`) reset with `seed`.

 # Safety
 `game` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RfmStatus rfm_env_new(const char *game, uint64_t seed, struct RfmEnv **out);

/*
 # Safety
 `env` must come from [`rfm_env_new`] and not be used afterwards.
 */
void rfm_env_free(struct RfmEnv *env);

/*
 Starts a new episode with `seed`.

 # Safety
 `env` must be a live environment handle.
 */
enum RfmStatus rfm_env_reset(struct RfmEnv *env, uint64_t seed);

/*
 # Safety
 `env` must be a live handle and `out` a valid pointer.
 */
enum RfmStatus rfm_env_n_agents(const struct RfmEnv *env, size_t *out);

/*
 # Safety
 `env` must be a live handle and `out` a valid pointer.
 */
enum RfmStatus rfm_env_n_vertices(const struct RfmEnv *env, size_t *out);

/*
 Applies one action per agent (0 up, 1 down, 2 left, 3 right, 4 stay),
 writes one reward per agent and whether the episode ended.

 # Safety
 `actions` must hold `n_actions` values, `rewards` `n_rewards` writable
 values, and `done` must be valid.
 */
enum RfmStatus rfm_env_step(struct RfmEnv *env,
                            const uint32_t *actions,
                            size_t n_actions,
                            double *rewards,
                            size_t n_rewards,
                            bool *done);

/*
 Writes the current graph's vertex features, `n_vertices * rfm_vertex_dim()`
 values row by row.

 # Safety
 `out` must point to `len` writable values.
 */
enum RfmStatus rfm_env_vertices(const struct RfmEnv *env, double *out, size_t len);

/*
 Loads a model checkpoint written by `rfm-lab train`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RfmStatus rfm_model_load(const char *path, struct RfmModel **out);

/*
 # Safety
 `model` must come from [`rfm_model_load`] and not be used afterwards.
 */
void rfm_model_free(struct RfmModel *model);

/*
 Forgets the recurrent state; call at the start of each episode.

 # Safety
 `model` must be a live handle.
 */
enum RfmStatus rfm_model_reset(struct RfmModel *model);

/*
 Number of values [`rfm_model_step`] writes: one output row per agent
 (5 action logits, or 1 return estimate).

 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum RfmStatus rfm_model_n_outputs(const struct RfmModel *model, size_t *out);

/*
 Advances the model one step on the environment's current graph and
 writes its per-agent outputs.

 # Safety
 `model` and `env` must be live handles; `out` must point to `len`
 writable values.
 */
enum RfmStatus rfm_model_step(struct RfmModel *model,
                              const struct RfmEnv *env,
                              double *out,
                              size_t len);

/*
 Loads a dataset file written by `rfm-lab collect`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RfmStatus rfm_dataset_load(const char *path, struct RfmDataset **out);

/*
 # Safety
 `ds` must come from [`rfm_dataset_load`] and not be used afterwards.
 */
void rfm_dataset_free(struct RfmDataset *ds);

/*
 # Safety
 `ds` must be a live handle and `out` a valid pointer.
 */
enum RfmStatus rfm_dataset_n_episodes(const struct RfmDataset *ds, size_t *out);

/*
 # Safety
 `ds` must be a live handle and `out` a valid pointer.
 */
enum RfmStatus rfm_dataset_episode_len(const struct RfmDataset *ds, size_t index, size_t *out);

/*
 Perfect roll-out length of an action model on one dataset episode. The
 model's own recurrent state is left untouched.

 # Safety
 `model` and `ds` must be live handles and `out` a valid pointer.
 */
enum RfmStatus rfm_dataset_perfect_rollout(const struct RfmModel *model,
                                           const struct RfmDataset *ds,
                                           size_t index,
                                           size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RFM_LAB_H */
