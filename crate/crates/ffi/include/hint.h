#ifndef HINT_H
#define HINT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum HintStatus {
  HINT_STATUS_OK = 0,
  HINT_STATUS_NULL_ARGUMENT = 1,
  HINT_STATUS_INVALID_ARGUMENT = 2,
  HINT_STATUS_CONFIG = 3,
  HINT_STATUS_MISSING_CHECKPOINT = 4,
  HINT_STATUS_RUN_DIR = 5,
  HINT_STATUS_IO = 6,
  HINT_STATUS_NUMERIC = 7,
  HINT_STATUS_INTERNAL = 8,
  HINT_STATUS_PANIC = 9,
} HintStatus;

// Policy evaluated by [`hint_eval`].
typedef enum HintEvalTarget {
  HINT_EVAL_TARGET_STUDENT = 0,
  HINT_EVAL_TARGET_TEACHER = 1,
} HintEvalTarget;

// Opaque run configuration.
typedef struct HintConfigHandle HintConfigHandle;

// Opaque environment with one live episode.
typedef struct HintEpisodeHandle HintEpisodeHandle;

// Headline numbers of an evaluation or a training run.
typedef struct HintEvalSummary {
  double success_rate;
  double steps_taken;
  size_t episodes;
  size_t seeds;
} HintEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *hint_version(void);

// Message of the last failed call on this thread, or null after a success.
// Valid until the next call into the library on the same thread.
const char *hint_last_error_message(void);

// Frees a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void hint_string_free(char *s);

// Configuration for a named preset, at desk scale unless `paper_scale`.
//
// # Safety
// `preset` must be a NUL-terminated string; `out` must be writable.
enum HintStatus hint_config_preset(const char *preset,
                                   bool paper_scale,
                                   struct HintConfigHandle **out);

// Configuration parsed from TOML layered over its preset.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum HintStatus hint_config_from_toml(const char *text, struct HintConfigHandle **out);

// The configuration as TOML; free the result with [`hint_string_free`].
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum HintStatus hint_config_to_toml(const struct HintConfigHandle *cfg, char **out);

// Sets the run seed.
//
// # Safety
// `cfg` must be a live handle.
enum HintStatus hint_config_set_seed(struct HintConfigHandle *cfg, uint64_t seed);

// Sets the student timestep budget.
//
// # Safety
// `cfg` must be a live handle.
enum HintStatus hint_config_set_student_timesteps(struct HintConfigHandle *cfg, uint64_t steps);

// Releases a configuration. Null is ignored.
//
// # Safety
// `cfg` must be null or a live handle, and is dangling afterwards.
void hint_config_free(struct HintConfigHandle *cfg);

// Pretrains the teacher into `run_dir`; `out` receives its evaluated success rate.
//
// # Safety
// `cfg` must be a live handle, `run_dir` a NUL-terminated path, `out` writable or null.
enum HintStatus hint_pretrain_teacher(const struct HintConfigHandle *cfg,
                                      const char *run_dir,
                                      double *out_success);

// Trains (or resumes) a run in `run_dir`; `out` receives the final evaluation.
//
// # Safety
// `cfg` must be a live handle, `run_dir` a NUL-terminated path, `out` writable or null.
enum HintStatus hint_train(const struct HintConfigHandle *cfg,
                           const char *run_dir,
                           bool resume,
                           struct HintEvalSummary *out);

// Evaluates the run's student or teacher over `episodes` × `n_seeds`.
//
// # Safety
// `cfg` must be a live handle, `run_dir` a NUL-terminated path, `seeds` readable
// for `n_seeds` values, and `out` writable.
enum HintStatus hint_eval(const struct HintConfigHandle *cfg,
                          const char *run_dir,
                          enum HintEvalTarget target,
                          size_t episodes,
                          const uint64_t *seeds,
                          size_t n_seeds,
                          struct HintEvalSummary *out);

// Starts an episode of a preset environment.
//
// # Safety
// `preset` must be a NUL-terminated string; `out` must be writable.
enum HintStatus hint_episode_new(const char *preset, uint64_t seed, struct HintEpisodeHandle **out);

// Number of agents acting in the episode.
//
// # Safety
// `ep` must be a live handle; `out` must be writable.
enum HintStatus hint_episode_n_agents(const struct HintEpisodeHandle *ep, size_t *out);

// Advances the episode with one action code per agent
// (0 up, 1 down, 2 left, 3 right, 4 stay, 5 extinguish).
// `reward` receives the team reward, `done` whether the episode ended.
//
// # Safety
// `ep` must be a live handle, `actions` readable for `n` codes, `reward` and
// `done` writable or null.
enum HintStatus hint_episode_step(struct HintEpisodeHandle *ep,
                                  const uint8_t *actions,
                                  size_t n,
                                  double *reward,
                                  bool *done);

// Whether the episode's task is accomplished.
//
// # Safety
// `ep` must be a live handle; `out` must be writable.
enum HintStatus hint_episode_success(const struct HintEpisodeHandle *ep, bool *out);

// Releases an episode. Null is ignored.
//
// # Safety
// `ep` must be null or a live handle, and is dangling afterwards.
void hint_episode_free(struct HintEpisodeHandle *ep);

// V-trace targets for one segment of length `n`, written to `out_v`.
//
// # Safety
// The input arrays must be readable and `out_v` writable for `n` values.
enum HintStatus hint_vtrace_targets(const double *rewards,
                                    const double *values,
                                    const double *target_logp,
                                    const double *behavior_logp,
                                    const bool *dones,
                                    size_t n,
                                    double bootstrap,
                                    double gamma,
                                    double *out_v);

// Histogram KL(student ‖ teacher) between two row-major point sets of width `dims`.
//
// # Safety
// `teacher` must be readable for `n_teacher * dims` values, `student` for
// `n_student * dims`, and `out` writable.
enum HintStatus hint_histogram_kl(const double *teacher,
                                  size_t n_teacher,
                                  const double *student,
                                  size_t n_student,
                                  size_t dims,
                                  size_t bins,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HINT_H */
