#ifndef DKS_H
#define DKS_H

#include <stddef.h>
#include <stdint.h>

// Status codes. Values 1-4 equal the `dks` process exit codes.
typedef enum DksStatus {
  DKS_STATUS_OK = 0,
  DKS_STATUS_VERIFICATION_FAILED = 1,
  DKS_STATUS_CONFIG_ERROR = 2,
  DKS_STATUS_TRAINING_ABORTED = 3,
  DKS_STATUS_IO_ERROR = 4,
  // Null pointer, bad UTF-8 or a buffer of the wrong size.
  DKS_STATUS_INVALID_ARGUMENT = 5,
  // A panic was caught at the boundary.
  DKS_STATUS_INTERNAL = 6,
} DksStatus;

// Opaque model handle.
typedef struct DksModel DksModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *dks_last_error(void);

// Builds a named preset (`cifar-mini`, `tiny-imagenet-mini`).
//
// # Safety
// `name` must be a NUL-terminated string and `out` a valid pointer.
enum DksStatus dks_model_preset(const char *name,
                                size_t num_classes,
                                size_t image_size,
                                uint64_t seed,
                                struct DksModel **out);

// Loads a checkpoint manifest (the blob is read from `<path>.bin`).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DksStatus dks_model_load(const char *path, struct DksModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum DksStatus dks_model_save(const struct DksModel *model, const char *path);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void dks_model_free(struct DksModel *model);

// Number of classifier heads (1 + auxiliary heads); 0 for null.
//
// # Safety
// `model` must be null or come from this library.
size_t dks_model_num_heads(const struct DksModel *model);

// Trainable parameter count; 0 for null.
//
// # Safety
// `model` must be null or come from this library.
size_t dks_model_trainable_count(const struct DksModel *model);

// Number of classes; 0 for null.
//
// # Safety
// `model` must be null or come from this library.
size_t dks_model_num_classes(const struct DksModel *model);

// Number of floats in one input sample (channels x height x width); 0 for null.
//
// # Safety
// `model` must be null or come from this library.
size_t dks_model_sample_len(const struct DksModel *model);

// Eval-mode logits of head `head` (0 = C1, 1 = C2, ...) for `batch`
// NCHW samples. `out` receives `batch * num_classes` floats.
//
// # Safety
// `input` must hold `batch * sample_len` floats and `out` `out_len`.
enum DksStatus dks_model_forward(const struct DksModel *model,
                                 const float *input,
                                 size_t batch,
                                 size_t head,
                                 float *out,
                                 size_t out_len);

// New model holding only the backbone and C1.
//
// # Safety
// `model` must come from this library and `out` be a valid pointer.
enum DksStatus dks_model_strip(const struct DksModel *model, struct DksModel **out);

// Runs a training config as `dks train` does. `out_dir` may be null to use
// the config's `out`.
//
// # Safety
// `config_path` must be NUL-terminated; `out_dir` null or NUL-terminated.
enum DksStatus dks_train(const char *config_path, const char *out_dir);

// Runs a verification suite (`grads`, `synergy`, `all`) with default
// options and `n_samples` Monte-Carlo samples per sigma. Reports go to
// `out_dir` unless it is null.
//
// # Safety
// `suite` must be NUL-terminated; `out_dir` null or NUL-terminated.
enum DksStatus dks_verify(const char *suite, size_t n_samples, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DKS_H */
