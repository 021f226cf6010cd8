#ifndef MISA_H
#define MISA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum MisaStatus {
  MISA_STATUS_OK = 0,
  MISA_STATUS_NULL_POINTER = 1,
  MISA_STATUS_INVALID_INPUT = 2,
  MISA_STATUS_CONFIG = 3,
  /**
   * A property suite reported violations or a hypothesis failed.
   */
  MISA_STATUS_VIOLATION = 4,
  MISA_STATUS_NUMERICAL = 5,
  /**
   * The caller's buffer is too small; the required size was written.
   */
  MISA_STATUS_BUFFER_TOO_SMALL = 6,
  MISA_STATUS_IO = 7,
  MISA_STATUS_PANIC = 8,
} MisaStatus;

/**
 * Transitions grouped by environment.
 */
typedef struct MisaBuffer MisaBuffer;

/**
 * Simulated family of linear environments.
 */
typedef struct MisaFamily MisaFamily;

/**
 * Result table of one experiment run.
 */
typedef struct MisaRun MisaRun;

/**
 * Library version as a static NUL-terminated string.
 */
const char *misa_version(void);

/**
 * Copies the calling thread's last error message into `buf`
 * (NUL-terminated). `needed` receives the message length.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes; `needed` may be null.
 */
enum MisaStatus misa_last_error(char *buf, size_t cap, size_t *needed);

/**
 * Toy family of three variables. `config_json` may be null for the
 * defaults, or a JSON object with any of `noise_std`, `reward_noise_std`,
 * `train_shifts`, `heldout_values`, `gamma`.
 *
 * # Safety
 * `config_json` is null or a NUL-terminated string; `out` is writable.
 */
enum MisaStatus misa_toy_family_new(const char *config_json, struct MisaFamily **out);

/**
 * # Safety
 * `family` is null or a handle from this library, not used afterwards.
 */
void misa_family_free(struct MisaFamily *family);

/**
 * Number of state variables, or 0 for a null handle.
 *
 * # Safety
 * `family` is null or a live handle.
 */
size_t misa_family_k(const struct MisaFamily *family);

/**
 * Number of toy training environments; their ids are `0..count`.
 */
size_t misa_toy_train_env_count(void);

/**
 * Collects `n_steps` transitions per listed environment under action 0.
 *
 * # Safety
 * `family` is a live handle, `env_ids` holds `n_envs` entries, `out` is
 * writable.
 */
enum MisaStatus misa_family_collect(const struct MisaFamily *family,
                                    const size_t *env_ids,
                                    size_t n_envs,
                                    size_t n_steps,
                                    uint64_t seed,
                                    struct MisaBuffer **out);

/**
 * # Safety
 * `buffer` is null or a handle from this library, not used afterwards.
 */
void misa_buffer_free(struct MisaBuffer *buffer);

/**
 * Total number of transitions, or 0 for a null handle.
 *
 * # Safety
 * `buffer` is null or a live handle.
 */
size_t misa_buffer_len(const struct MisaBuffer *buffer);

/**
 * Linear abstraction of the buffer at level `alpha`. The selected
 * variable indices are written in increasing order to `vars` (capacity
 * `cap`); `n_vars` receives their count.
 *
 * # Safety
 * `buffer` is a live handle, `vars` is valid for `cap` entries, `n_vars`
 * is writable.
 */
enum MisaStatus misa_linear_abstraction(const struct MisaBuffer *buffer,
                                        double alpha,
                                        size_t *vars,
                                        size_t cap,
                                        size_t *n_vars);

/**
 * Wasserstein-1 distance between distributions `p` and `q` over `n`
 * points with row-major distance matrix `dist` (`n * n` entries).
 *
 * # Safety
 * `p` and `q` hold `n` entries, `dist` holds `n * n`, `out` is writable.
 */
enum MisaStatus misa_wasserstein1(const double *p,
                                  const double *q,
                                  const double *dist,
                                  size_t n,
                                  double *out);

/**
 * Runs the experiment described by a JSON config (the CLI's format).
 * Property violations do not fail the call; query them with
 * [`misa_run_violation_count`].
 *
 * # Safety
 * `config_json` is NUL-terminated and `out` is writable.
 */
enum MisaStatus misa_run_experiment(const char *config_json, struct MisaRun **out);

/**
 * # Safety
 * `run` is null or a handle from this library, not used afterwards.
 */
void misa_run_free(struct MisaRun *run);

/**
 * Number of result rows, or 0 for a null handle.
 *
 * # Safety
 * `run` is null or a live handle.
 */
size_t misa_run_row_count(const struct MisaRun *run);

/**
 * Number of failed property checks, or 0 for a null handle.
 *
 * # Safety
 * `run` is null or a live handle.
 */
size_t misa_run_violation_count(const struct MisaRun *run);

/**
 * Copies the CSV table, NUL-terminated, into `buf`. `needed` receives the
 * CSV length in bytes; call with `cap = 0` to query it.
 *
 * # Safety
 * `run` is a live handle, `buf` is valid for `cap` bytes, `needed` may be
 * null.
 */
enum MisaStatus misa_run_csv(const struct MisaRun *run, char *buf, size_t cap, size_t *needed);

#endif  /* MISA_H */
