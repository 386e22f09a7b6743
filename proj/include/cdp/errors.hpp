#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cdp {

// Every failure carries a machine-parseable category ("module.kind") so the CLI
// can report a single-line error.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define CDP_DEFINE_ERROR(Name, Category)                                   \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& message) : Error(Category, message) {} \
  }

CDP_DEFINE_ERROR(InvalidRotation, "geometry.invalid_rotation");
CDP_DEFINE_ERROR(DegenerateRotation, "geometry.degenerate_rotation");

CDP_DEFINE_ERROR(ShapeMismatch, "autodiff.shape_mismatch");
CDP_DEFINE_ERROR(NonScalarLoss, "autodiff.non_scalar_loss");

CDP_DEFINE_ERROR(StepOutOfRange, "diffusion.step_out_of_range");
CDP_DEFINE_ERROR(StepOrderViolation, "diffusion.step_order_violation");
CDP_DEFINE_ERROR(UnknownScheduleKind, "diffusion.unknown_schedule_kind");

CDP_DEFINE_ERROR(MissingStats, "policy.missing_stats");
CDP_DEFINE_ERROR(NoCoverage, "policy.no_coverage");
CDP_DEFINE_ERROR(EnvTerminated, "policy.env_terminated");
CDP_DEFINE_ERROR(InferenceFailure, "policy.inference_failure");

CDP_DEFINE_ERROR(UnknownPreset, "compliance.unknown_preset");

CDP_DEFINE_ERROR(Diverged, "sim.diverged");

CDP_DEFINE_ERROR(TaskMismatch, "experts.task_mismatch");
CDP_DEFINE_ERROR(ExpertFailure, "experts.expert_failure");

CDP_DEFINE_ERROR(VersionMismatch, "format.version_mismatch");
CDP_DEFINE_ERROR(EmptyDataset, "datastore.empty_dataset");

CDP_DEFINE_ERROR(EmptySet, "eval.empty_set");

CDP_DEFINE_ERROR(UnknownTask, "config.unknown_task");
CDP_DEFINE_ERROR(InvalidConfig, "config.invalid");
CDP_DEFINE_ERROR(IoError, "io.failure");

#undef CDP_DEFINE_ERROR

class CorruptFile : public Error {
 public:
  CorruptFile(const std::string& message, std::size_t offset)
      : Error("format.corrupt_file", message + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace cdp
