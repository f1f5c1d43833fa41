#ifndef REGIME_MFG_H
#define REGIME_MFG_H

#include <stdbool.h>
#include <stddef.h>

typedef enum RmfgStatus {
  RMFG_STATUS_OK = 0,
  RMFG_STATUS_NULL_POINTER = 1,
  RMFG_STATUS_INVALID_UTF8 = 2,
  RMFG_STATUS_PARSE = 3,
  RMFG_STATUS_SOLVE = 4,
  // The fixed point stopped without converging; the solution is still returned.
  RMFG_STATUS_NOT_CONVERGED = 5,
  RMFG_STATUS_OUT_OF_RANGE = 6,
  RMFG_STATUS_BUFFER_TOO_SMALL = 7,
  RMFG_STATUS_INVALID_ARGUMENT = 8,
  RMFG_STATUS_PANIC = 9,
} RmfgStatus;

// Which per-node array to copy out.
typedef enum RmfgField {
  // Feedback strategy; empty at leaves.
  RMFG_FIELD_STRATEGY = 0,
  // Diagonal value.
  RMFG_FIELD_VALUE = 1,
  // Conditional cell masses.
  RMFG_FIELD_DENSITY = 2,
} RmfgField;

// Parsed scenario.
typedef struct RmfgScenario RmfgScenario;

// Solved equilibrium together with its path tree.
typedef struct RmfgSolution RmfgSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// NUL-terminated library version string with static lifetime.
const char *rmfg_version(void);

// Copies the calling thread's last error message, NUL-terminated and
// truncated to `len` bytes. Returns the full message length in bytes
// (excluding the terminator).
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t rmfg_last_error_message(char *buf, size_t len);

// Parses scenario text.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum RmfgStatus rmfg_scenario_parse(const char *text, struct RmfgScenario **out);

// # Safety
// `s` must be null or a handle from [`rmfg_scenario_parse`] not yet freed.
void rmfg_scenario_free(struct RmfgScenario *s);

// Number of regimes, time steps and spatial points.
//
// # Safety
// `s` must be a live handle; each output pointer may be null.
enum RmfgStatus rmfg_scenario_dims(const struct RmfgScenario *s,
                                   size_t *regimes,
                                   size_t *time_steps,
                                   size_t *space_points);

// Row-major `m x m` transition matrix of the regime chain over `dt`.
//
// # Safety
// `s` must be a live handle; `out` must hold `len` doubles.
enum RmfgStatus rmfg_transition_matrix(const struct RmfgScenario *s,
                                       double dt,
                                       double *out,
                                       size_t len,
                                       size_t *written);

// `W_2` distance between two cell-mass vectors on the scenario grid.
//
// # Safety
// `s` must be a live handle; `a` and `b` must hold `n` doubles; `out` writable.
enum RmfgStatus rmfg_wasserstein2(const struct RmfgScenario *s,
                                  const double *a,
                                  const double *b,
                                  size_t n,
                                  double *out);

// Solves the equilibrium. Non-positive `tol` or zero `max_iter` keep the
// scenario's own settings. A run that stops without converging still hands
// back a solution and returns [`RmfgStatus::NotConverged`].
//
// # Safety
// `s` must be a live handle; `out` must be writable.
enum RmfgStatus rmfg_solve(const struct RmfgScenario *s,
                           double tol,
                           size_t max_iter,
                           struct RmfgSolution **out);

// # Safety
// `sol` must be null or a handle from [`rmfg_solve`] not yet freed.
void rmfg_solution_free(struct RmfgSolution *sol);

// Iteration count, convergence flag, node count and empirical contraction.
//
// # Safety
// `sol` must be a live handle; each output pointer may be null.
enum RmfgStatus rmfg_solution_summary(const struct RmfgSolution *sol,
                                      size_t *iterations,
                                      bool *converged,
                                      size_t *nodes,
                                      double *contraction);

// Node reached by following the interval regimes `labels[0..len]` (0-based)
// from the root.
//
// # Safety
// `sol` must be a live handle; `labels` must hold `len` values.
enum RmfgStatus rmfg_solution_find_node(const struct RmfgSolution *sol,
                                        const size_t *labels,
                                        size_t len,
                                        size_t *node);

// Copies a per-node array on the spatial grid.
//
// # Safety
// `sol` must be a live handle; `out` must hold `len` doubles.
enum RmfgStatus rmfg_solution_node_field(const struct RmfgSolution *sol,
                                         enum RmfgField field,
                                         size_t node,
                                         double *out,
                                         size_t len,
                                         size_t *written);

// Sup-norm step of each fixed-point iteration.
//
// # Safety
// `sol` must be a live handle; `out` must hold `len` doubles.
enum RmfgStatus rmfg_solution_distances(const struct RmfgSolution *sol,
                                        double *out,
                                        size_t len,
                                        size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REGIME_MFG_H */
