#ifndef LRTUNER_H
#define LRTUNER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LrtStatus {
  LRT_STATUS_OK = 0,
  LRT_STATUS_INVALID_ARGUMENT = 1,
  LRT_STATUS_DEGENERATE_DESIGN = 2,
  LRT_STATUS_INVALID_SAMPLE = 3,
  LRT_STATUS_NULL_POINTER = 4,
  LRT_STATUS_PARSE = 5,
  LRT_STATUS_PROTOCOL = 6,
  LRT_STATUS_INTERNAL = 7,
} LrtStatus;

typedef enum LrtProposalKind {
  LRT_PROPOSAL_KIND_ACCEPT = 0,
  LRT_PROPOSAL_KIND_REJECT_NO_MINIMUM = 1,
  LRT_PROPOSAL_KIND_REJECT_PHASE_FILTER = 2,
  LRT_PROPOSAL_KIND_CLAMPED_TO_BOUND = 3,
} LrtProposalKind;

typedef enum LrtPhase {
  LRT_PHASE_EXPLORE = 0,
  LRT_PHASE_EXPLOIT = 1,
} LrtPhase;

typedef enum LrtEvent {
  LRT_EVENT_RECOMPUTE_ACCEPT = 0,
  LRT_EVENT_RECOMPUTE_REJECT_PHASE = 1,
  LRT_EVENT_RECOMPUTE_REJECT_SATURATION = 2,
  LRT_EVENT_RECOMPUTE_REJECT_INVALID = 3,
  LRT_EVENT_ROLLBACK = 4,
  LRT_EVENT_MANUAL_CHANGE = 5,
} LrtEvent;

/*
 Tuner decision logic for hosts that run their own model: the host
 evaluates losses at the offsets from [`lrt_controller_probe_grid`] and
 passes them to [`lrt_controller_decide`].
 */
typedef struct LrtController LrtController;

/*
 A closed-form schedule bound to a run length.
 */
typedef struct LrtSchedule LrtSchedule;

typedef struct LrtQuadFit {
  double k0;
  double k1;
  double k2;
  double residual_rms;
} LrtQuadFit;

typedef struct LrtProposal {
  enum LrtProposalKind kind;
  /*
   Zero for rejections.
   */
  double epsilon;
} LrtProposal;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failure on this thread, or null. The pointer stays
 valid until the next failing call on this thread.
 */
const char *lrt_last_error(void);

/*
 Least-squares quadratic through `n` points `(eps[i], losses[i])`.

 # Safety
 `eps` and `losses` must point to `n` readable doubles; `out` must be writable.
 */
enum LrtStatus lrt_fit_quadratic(const double *eps,
                                 const double *losses,
                                 size_t n,
                                 struct LrtQuadFit *out);

/*
 Trust bound `cbrt(r * loss)`.

 # Safety
 `out` must be writable.
 */
enum LrtStatus lrt_epsilon_bound(double r, double loss, double *out);

/*
 # Safety
 `fit` must be readable and `out` writable.
 */
enum LrtStatus lrt_propose_epsilon(const struct LrtQuadFit *fit,
                                   double bound,
                                   struct LrtProposal *out);

/*
 Writes the `n` probe offsets around `eta` to `out`.

 # Safety
 `out` must point to `n` writable doubles.
 */
enum LrtStatus lrt_probe_points(double eta,
                                double bound,
                                size_t n,
                                double span_fraction,
                                double *out);

/*
 Parses a schedule from JSON, e.g. `{"kind":"one_cycle","max_lr":0.5}`.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum LrtStatus lrt_schedule_new(const char *json, uint64_t total_steps, struct LrtSchedule **out);

/*
 # Safety
 `schedule` must come from [`lrt_schedule_new`]; `out` must be writable.
 */
enum LrtStatus lrt_schedule_lr_at(const struct LrtSchedule *schedule, uint64_t step, double *out);

/*
 # Safety
 `schedule` must come from [`lrt_schedule_new`] and not be used afterwards.
 Null is ignored.
 */
void lrt_schedule_free(struct LrtSchedule *schedule);

/*
 Creates a controller from a JSON tuner config; `total_steps` is required
 there, other fields have defaults.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum LrtStatus lrt_controller_new(const char *json, struct LrtController **out);

/*
 Current learning rate, or NaN for a null handle.

 # Safety
 `ctrl` must come from [`lrt_controller_new`] or be null.
 */
double lrt_controller_lr(const struct LrtController *ctrl);

/*
 # Safety
 `ctrl` must come from [`lrt_controller_new`]; `out` must be writable.
 */
enum LrtStatus lrt_controller_phase(const struct LrtController *ctrl,
                                    uint64_t step,
                                    enum LrtPhase *out);

/*
 Offsets to probe around the current learning rate, given the loss
 measured at it. Writes `n_probes` values.

 # Safety
 `ctrl` must come from [`lrt_controller_new`]; `out` must hold `cap`
 doubles; `written` must be writable.
 */
enum LrtStatus lrt_controller_probe_grid(const struct LrtController *ctrl,
                                         double loss_at_zero,
                                         double *out,
                                         size_t cap,
                                         size_t *written);

/*
 Fits the probed losses and updates the learning rate.

 # Safety
 `ctrl` must come from [`lrt_controller_new`]; `eps` and `losses` must
 point to `n` doubles; `event` must be writable.
 */
enum LrtStatus lrt_controller_decide(struct LrtController *ctrl,
                                     uint64_t step,
                                     const double *eps,
                                     const double *losses,
                                     size_t n,
                                     double loss_at_zero,
                                     enum LrtEvent *event);

/*
 Records a window drop rate at the current learning rate.

 # Safety
 `ctrl` must come from [`lrt_controller_new`].
 */
enum LrtStatus lrt_controller_observe_rate(struct LrtController *ctrl, double rate);

/*
 Exploit-phase gate: `*saturated` is true when a recompute is due.

 # Safety
 `ctrl` must come from [`lrt_controller_new`]; `saturated` must be writable.
 */
enum LrtStatus lrt_controller_saturation_gate(struct LrtController *ctrl,
                                              double rate,
                                              bool *saturated);

/*
 # Safety
 `ctrl` must come from [`lrt_controller_new`] and not be used afterwards.
 Null is ignored.
 */
void lrt_controller_free(struct LrtController *ctrl);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LRTUNER_H */
