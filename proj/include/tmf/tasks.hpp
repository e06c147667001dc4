#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmf/nn.hpp"
#include "tmf/util.hpp"

namespace tmf {

inline constexpr int kMinSetSize = 1;
inline constexpr int kMaxSetSize = 16;

// A task is a fixed data distribution. Sampling is a pure function of
// (stream seed, draw index), so any sample can be regenerated exactly
// without storing it and without caring about draw order.
class Task {
 public:
  virtual ~Task() = default;
  virtual Sample sample(std::uint64_t stream_seed, std::uint32_t index) const = 0;
  virtual int input_dim() const = 0;
  virtual int output_dim() const = 0;
};

// y = a * sin(b * x + c) with x uniform on [-5, 5].
class SineTask : public Task {
 public:
  SineTask(float amplitude, float frequency, float phase)
      : amplitude_(amplitude), frequency_(frequency), phase_(phase) {}

  // Draw order is amplitude, frequency, phase.
  static SineTask draw(Rng& rng) {
    const float a = static_cast<float>(rng.uniform(0.1, 5.0));
    const float b = static_cast<float>(rng.uniform(0.8, 1.2));
    const float c = static_cast<float>(rng.uniform(0.0, kPi));
    return SineTask(a, b, c);
  }

  Sample sample(std::uint64_t stream_seed, std::uint32_t index) const override {
    Rng rng(seed_mix(stream_seed, index));
    const float x = static_cast<float>(rng.uniform(-5.0, 5.0));
    Sample s;
    s.input = VectorF::Constant(1, x);
    s.target = VectorF::Constant(1, amplitude_ * std::sin(frequency_ * x + phase_));
    return s;
  }

  int input_dim() const override { return 1; }
  int output_dim() const override { return 1; }

  float amplitude() const { return amplitude_; }
  float frequency() const { return frequency_; }
  float phase() const { return phase_; }

 private:
  static constexpr double kPi = 3.141592653589793238462643383279502884;
  float amplitude_, frequency_, phase_;
};

// Gaussian blobs around per-task class centers drawn uniformly from
// [-1, 1]^d. A sample picks a class uniformly, adds isotropic noise to its
// center and carries the class as a one-hot target.
class SyntheticClassTask : public Task {
 public:
  SyntheticClassTask(std::vector<VectorF> centers, float noise)
      : centers_(std::move(centers)), noise_(noise) {
    if (centers_.empty()) throw std::invalid_argument("task needs at least one class");
  }

  static SyntheticClassTask draw(Rng& rng, int input_dim, int class_count, float noise) {
    std::vector<VectorF> centers;
    centers.reserve(static_cast<std::size_t>(class_count));
    for (int c = 0; c < class_count; ++c) {
      VectorF center(input_dim);
      for (int i = 0; i < input_dim; ++i) {
        center[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
      }
      centers.push_back(std::move(center));
    }
    return SyntheticClassTask(std::move(centers), noise);
  }

  Sample sample(std::uint64_t stream_seed, std::uint32_t index) const override {
    Rng rng(seed_mix(stream_seed, index));
    const int cls = static_cast<int>(rng.index(centers_.size()));
    Sample s;
    s.input = centers_[static_cast<std::size_t>(cls)];
    for (Eigen::Index i = 0; i < s.input.size(); ++i) {
      s.input[i] += noise_ * static_cast<float>(rng.gaussian());
    }
    s.target = VectorF::Zero(static_cast<Eigen::Index>(centers_.size()));
    s.target[cls] = 1.0f;
    return s;
  }

  int input_dim() const override { return static_cast<int>(centers_.front().size()); }
  int output_dim() const override { return static_cast<int>(centers_.size()); }

 private:
  std::vector<VectorF> centers_;
  float noise_;
};

enum class TaskFamily { Sine, SyntheticClass };

inline TaskFamily parse_task_family(const std::string& text) {
  if (text == "sine") return TaskFamily::Sine;
  if (text == "synthetic_class") return TaskFamily::SyntheticClass;
  throw std::invalid_argument("unknown task family '" + text + "'");
}

inline std::string to_string(TaskFamily f) {
  return f == TaskFamily::Sine ? "sine" : "synthetic_class";
}

struct TaskFamilySpec {
  TaskFamily family = TaskFamily::Sine;
  int input_dim = 16;    // synthetic_class only
  int class_count = 5;   // synthetic_class only
  float noise = 0.3f;    // synthetic_class only
};

// Infinite deterministic sequence of tasks: task_at(i) depends only on the
// sampler seed and i.
class TaskSampler {
 public:
  TaskSampler(TaskFamilySpec spec, std::uint64_t seed) : spec_(spec), seed_(seed) {}

  std::unique_ptr<Task> task_at(std::uint32_t i) const {
    Rng rng(seed_mix(seed_, i));
    switch (spec_.family) {
      case TaskFamily::Sine:
        return std::make_unique<SineTask>(SineTask::draw(rng));
      case TaskFamily::SyntheticClass:
        return std::make_unique<SyntheticClassTask>(SyntheticClassTask::draw(
            rng, spec_.input_dim, spec_.class_count, spec_.noise));
    }
    throw std::logic_error("unreachable");
  }

  const TaskFamilySpec& family_spec() const { return spec_; }

 private:
  TaskFamilySpec spec_;
  std::uint64_t seed_;
};

struct TaskSplit {
  TaskSampler train;
  TaskSampler test;
};

inline TaskSplit make_task_split(const TaskFamilySpec& spec, std::uint64_t seed) {
  return TaskSplit{TaskSampler(spec, seed_mix(seed, seed_tag::kTrainTasks)),
                   TaskSampler(spec, seed_mix(seed, seed_tag::kTestTasks))};
}

// Fixed-length one-shot view of a task's sample sequence. Each sample is
// produced at most once; consumers that need a sample again must have kept
// it themselves, which the training paths deliberately never do.
class SampleStream {
 public:
  SampleStream(const Task& task, std::uint64_t seed, int length)
      : task_(&task), seed_(seed), length_(length) {
    if (length < kMinSetSize || length > kMaxSetSize) {
      throw std::invalid_argument("stream length " + std::to_string(length) +
                                  " outside [" + std::to_string(kMinSetSize) + ", " +
                                  std::to_string(kMaxSetSize) + "]");
    }
  }

  bool has_next() const { return position_ < length_; }
  int length() const { return length_; }
  int position() const { return position_; }

  Sample next() {
    if (!has_next()) throw std::out_of_range("sample stream exhausted");
    return task_->sample(seed_, static_cast<std::uint32_t>(position_++));
  }

 private:
  const Task* task_;
  std::uint64_t seed_;
  int length_;
  int position_ = 0;
};

// One round's worth of data for one client: a support stream of size S and
// a query stream of size Q over the same task, independently seeded.
// Episodes hand out fresh one-shot streams on demand; every stream replays
// the same deterministic sequence, so a learner can traverse the data again
// (one pass per stream) without ever storing a sample.
struct Episode {
  const Task* task;
  std::uint64_t support_seed;
  std::uint64_t query_seed;
  int support_size;
  int query_size;

  SampleStream support_stream() const {
    return SampleStream(*task, support_seed, support_size);
  }
  SampleStream query_stream() const { return SampleStream(*task, query_seed, query_size); }
};

inline Episode make_episode(const Task& task, std::uint64_t episode_seed, int support_size,
                            int query_size) {
  return Episode{&task, seed_mix(episode_seed, 1), seed_mix(episode_seed, 2), support_size,
                 query_size};
}

}  // namespace tmf
