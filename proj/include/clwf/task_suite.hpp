#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "clwf/rng.hpp"
#include "clwf/tensor.hpp"

namespace clwf {

enum class Split { Train, Dev, Test };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct Sample {
    Tensor x; // [L, d_in], float32-representable values
    int y = 0;
};

// Shape of the synthetic data shared by every task in a suite.
struct GenConfig {
    int d_in = 32;
    int seq_len = 8;
    int n_classes = 10;
    int d_latent = 10;
    double frame_jitter = 0.1;  // stddev of per-frame latent jitter
    double noise_rho = 0.05;    // label flip probability
    double min_margin = 0.35;   // top-2 logit gap below which latents are redrawn
    double offset_scale = 1.0;  // per-task input signature magnitude
    int n_train = 2000;
    int n_dev = 500;
    int n_test = 500;
    std::map<std::string, int> n_train_override; // per-task size skew, optional
};

struct TaskSpec {
    std::string task_id;
    std::uint64_t seed = 0;
    std::uint64_t rotation_seed = 0;
    std::uint64_t offset_seed = 0;
    std::vector<int> label_perm;
    double noise_rho = 0.0;
    int n_train = 0;
    int n_dev = 0;
    int n_test = 0;
    int group = 0;
};

// A family of related classification tasks. All tasks share the latent
// ground-truth maps (A, B); each task observes inputs through its own
// orthogonal rotation and emits labels through its own permutation plus
// label noise. Fully reproducible from the master seed.
class TaskSuite {
public:
    static TaskSuite generate(int n_groups, const std::vector<int>& tasks_per_group,
                              std::uint64_t master_seed, const GenConfig& cfg);

    const GenConfig& config() const { return cfg_; }
    std::uint64_t master_seed() const { return master_seed_; }
    const Tensor& latent_map() const { return a_; }   // [d_latent, d_in]
    const Tensor& class_map() const { return b_; }    // [n_classes, d_latent]
    const std::vector<TaskSpec>& tasks() const { return tasks_; }
    int n_groups() const { return n_groups_; }

    const TaskSpec& task(const std::string& task_id) const;
    const Tensor& rotation(const std::string& task_id) const; // [d_in, d_in]
    const Tensor& offset(const std::string& task_id) const;   // [d_in]
    std::vector<std::string> task_ids() const;
    std::vector<std::string> group_task_ids(int group) const;

    // Samples are drawn from an independent stream per (task, split);
    // repeated calls produce identical data.
    std::vector<Sample> make_split(const std::string& task_id, Split split) const;

    // The generating process' own classifier: de-rotate the mean frame,
    // push it through the latent maps, apply the task's label permutation.
    // Reproduces every clean (pre-noise) label exactly.
    int oracle_predict(const std::string& task_id, const Tensor& x) const;
    // Same but without the label permutation; used by transfer probes.
    int clean_label(const std::string& task_id, const Tensor& x) const;
    // Ground-truth class logits for a stored sample.
    std::vector<double> oracle_logits(const std::string& task_id, const Tensor& x) const;
    // Q_t^T applied to the mean frame: the shared-latent representation.
    Tensor derotated_mean(const std::string& task_id, const Tensor& x) const;

private:
    GenConfig cfg_;
    std::uint64_t master_seed_ = 0;
    int n_groups_ = 0;
    Tensor a_;
    Tensor b_;
    std::vector<TaskSpec> tasks_;
    std::map<std::string, Tensor> rotations_;
    std::map<std::string, Tensor> offsets_;
    std::map<std::string, std::size_t> index_;
};

// Seeded epoch shuffle cut into batches; the final batch may be short.
// Every index appears exactly once.
std::vector<std::vector<std::size_t>> epoch_batch_indices(std::size_t split_size,
                                                          std::size_t batch_size,
                                                          std::uint64_t epoch_seed);

std::vector<std::vector<const Sample*>> epoch_batches(const std::vector<Sample>& samples,
                                                      std::size_t batch_size,
                                                      std::uint64_t epoch_seed);

// Dataset container header, round-tripped through the binary format.
struct TaskFileHeader {
    std::string task_id;
    std::int64_t n = 0;
    int seq_len = 0;
    int d_in = 0;
    int n_classes = 0;
    std::uint64_t seed = 0;
    std::string split;
};

// Binary container: magic "CLWF1", u32 LE header length, UTF-8 JSON header,
// n*L*d_in float32 LE features, n uint16 LE labels.
void save_task(const TaskFileHeader& header, const std::vector<Sample>& samples,
               const std::filesystem::path& path);
std::pair<TaskFileHeader, std::vector<Sample>> load_task(const std::filesystem::path& path);

} // namespace clwf
