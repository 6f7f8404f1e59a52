#include "clwf/task_suite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <numeric>

#include <json.hpp>

namespace clwf {

using nlohmann::json;

const char* split_name(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
    }
    return "?";
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "dev") return Split::Dev;
    if (name == "test") return Split::Test;
    throw LookupError("unknown split '" + name + "'");
}

namespace {

int split_index(Split s) {
    return s == Split::Train ? 0 : (s == Split::Dev ? 1 : 2);
}

double as_f32(double v) {
    return static_cast<double>(static_cast<float>(v));
}

// Orthogonalizes a seeded Gaussian matrix by modified Gram-Schmidt with a
// positive-diagonal sign fix, so the result is a deterministic rotation.
Tensor random_rotation(std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Tensor q({d, d});
    for (std::size_t i = 0; i < d * d; ++i) {
        q.at(i) = rng.normal();
    }
    for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t prev = 0; prev < c; ++prev) {
            double dot = 0.0;
            for (std::size_t r = 0; r < d; ++r) {
                dot += q.at(r, c) * q.at(r, prev);
            }
            for (std::size_t r = 0; r < d; ++r) {
                q.at(r, c) -= dot * q.at(r, prev);
            }
        }
        double norm = 0.0;
        for (std::size_t r = 0; r < d; ++r) {
            norm += q.at(r, c) * q.at(r, c);
        }
        norm = std::sqrt(norm);
        if (norm < 1e-10) {
            throw NumericError("random_rotation: degenerate column");
        }
        const double sign = q.at(c, c) < 0.0 ? -1.0 : 1.0;
        for (std::size_t r = 0; r < d; ++r) {
            q.at(r, c) *= sign / norm;
        }
    }
    return q;
}

int argmax_lowest(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i) {
        if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) {
            best = i;
        }
    }
    return best;
}

} // namespace

TaskSuite TaskSuite::generate(int n_groups, const std::vector<int>& tasks_per_group,
                              std::uint64_t master_seed, const GenConfig& cfg) {
    if (n_groups < 1 || static_cast<std::size_t>(n_groups) != tasks_per_group.size()) {
        throw ArgumentError("generate_suite: tasks_per_group must list every group");
    }
    for (int count : tasks_per_group) {
        if (count < 1) {
            throw ArgumentError("generate_suite: each group needs at least one task");
        }
    }
    if (cfg.d_in < 2 || cfg.d_latent < 1 || cfg.n_classes < 2 || cfg.seq_len < 1) {
        throw ArgumentError("generate_suite: degenerate dimensions");
    }
    if (cfg.noise_rho < 0.0 || cfg.noise_rho >= 0.5) {
        throw ArgumentError("generate_suite: noise_rho outside [0, 0.5)");
    }

    TaskSuite suite;
    suite.cfg_ = cfg;
    suite.master_seed_ = master_seed;
    suite.n_groups_ = n_groups;

    const auto d_in = static_cast<std::size_t>(cfg.d_in);
    const auto d_latent = static_cast<std::size_t>(cfg.d_latent);
    const auto n_classes = static_cast<std::size_t>(cfg.n_classes);

    Rng shared_rng(derive_seed(master_seed, "suite/shared"));
    // Orthonormal latent projections make the latent coordinates of an
    // isotropic input exactly i.i.d., so the class regions below come out
    // balanced instead of dominated by a few directions.
    suite.a_ = Tensor({d_latent, d_in});
    for (std::size_t i = 0; i < suite.a_.numel(); ++i) {
        suite.a_.at(i) = shared_rng.normal();
    }
    for (std::size_t r = 0; r < d_latent; ++r) {
        for (std::size_t prev = 0; prev < r; ++prev) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d_in; ++c) {
                dot += suite.a_.at(r, c) * suite.a_.at(prev, c);
            }
            for (std::size_t c = 0; c < d_in; ++c) {
                suite.a_.at(r, c) -= dot * suite.a_.at(prev, c);
            }
        }
        double norm = 0.0;
        for (std::size_t c = 0; c < d_in; ++c) {
            norm += suite.a_.at(r, c) * suite.a_.at(r, c);
        }
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            throw NumericError("generate_suite: degenerate latent direction");
        }
        for (std::size_t c = 0; c < d_in; ++c) {
            suite.a_.at(r, c) /= norm;
        }
    }
    // With d_latent == n_classes each class reads one latent coordinate,
    // which keeps the label marginals exactly exchangeable; otherwise fall
    // back to equal-norm random class directions.
    suite.b_ = Tensor({n_classes, d_latent});
    if (d_latent == n_classes) {
        for (std::size_t c = 0; c < n_classes; ++c) {
            suite.b_.at(c, c) = 1.0;
        }
    } else {
        for (std::size_t c = 0; c < n_classes; ++c) {
            double norm = 0.0;
            for (std::size_t i = 0; i < d_latent; ++i) {
                const double v = shared_rng.normal();
                suite.b_.at(c, i) = v;
                norm += v * v;
            }
            norm = std::sqrt(norm);
            if (norm < 1e-12) {
                throw NumericError("generate_suite: degenerate class direction");
            }
            for (std::size_t i = 0; i < d_latent; ++i) {
                suite.b_.at(c, i) /= norm;
            }
        }
    }

    for (int g = 0; g < n_groups; ++g) {
        for (int t = 0; t < tasks_per_group[static_cast<std::size_t>(g)]; ++t) {
            TaskSpec spec;
            spec.task_id = "g" + std::to_string(g) + "t" + std::to_string(t);
            spec.group = g;
            const auto gu = static_cast<std::uint64_t>(g);
            const auto tu = static_cast<std::uint64_t>(t);
            spec.seed = derive_seed(master_seed, "task/data", gu, tu);
            spec.rotation_seed = derive_seed(master_seed, "task/rotation", gu, tu);
            spec.offset_seed = derive_seed(master_seed, "task/offset", gu, tu);
            spec.noise_rho = cfg.noise_rho;
            spec.n_train = cfg.n_train;
            if (auto it = cfg.n_train_override.find(spec.task_id);
                it != cfg.n_train_override.end()) {
                spec.n_train = it->second;
            }
            spec.n_dev = cfg.n_dev;
            spec.n_test = cfg.n_test;

            spec.label_perm.resize(n_classes);
            std::iota(spec.label_perm.begin(), spec.label_perm.end(), 0);
            Rng perm_rng(derive_seed(master_seed, "task/label_perm", gu, tu));
            perm_rng.shuffle(spec.label_perm);

            suite.rotations_.emplace(spec.task_id, random_rotation(d_in, spec.rotation_seed));
            // The offset is the task's signature in input space; it is what
            // lets a single shared model tell tasks apart, the way a
            // listener can tell languages apart.
            Rng offset_rng(spec.offset_seed);
            Tensor offset({d_in});
            for (std::size_t i = 0; i < d_in; ++i) {
                offset.at(i) = offset_rng.normal(0.0, cfg.offset_scale);
            }
            suite.offsets_.emplace(spec.task_id, std::move(offset));
            suite.index_.emplace(spec.task_id, suite.tasks_.size());
            suite.tasks_.push_back(std::move(spec));
        }
    }
    return suite;
}

const TaskSpec& TaskSuite::task(const std::string& task_id) const {
    auto it = index_.find(task_id);
    if (it == index_.end()) {
        throw LookupError("suite: unknown task '" + task_id + "'");
    }
    return tasks_[it->second];
}

const Tensor& TaskSuite::rotation(const std::string& task_id) const {
    auto it = rotations_.find(task_id);
    if (it == rotations_.end()) {
        throw LookupError("suite: unknown task '" + task_id + "'");
    }
    return it->second;
}

const Tensor& TaskSuite::offset(const std::string& task_id) const {
    auto it = offsets_.find(task_id);
    if (it == offsets_.end()) {
        throw LookupError("suite: unknown task '" + task_id + "'");
    }
    return it->second;
}

std::vector<std::string> TaskSuite::task_ids() const {
    std::vector<std::string> ids;
    ids.reserve(tasks_.size());
    for (const TaskSpec& t : tasks_) {
        ids.push_back(t.task_id);
    }
    return ids;
}

std::vector<std::string> TaskSuite::group_task_ids(int group) const {
    std::vector<std::string> ids;
    for (const TaskSpec& t : tasks_) {
        if (t.group == group) {
            ids.push_back(t.task_id);
        }
    }
    return ids;
}

std::vector<Sample> TaskSuite::make_split(const std::string& task_id, Split split) const {
    const TaskSpec& spec = task(task_id);
    const Tensor& q = rotation(task_id);
    const Tensor& mu = offset(task_id);
    const auto d_in = static_cast<std::size_t>(cfg_.d_in);
    const auto seq_len = static_cast<std::size_t>(cfg_.seq_len);
    const int count =
        split == Split::Train ? spec.n_train : (split == Split::Dev ? spec.n_dev : spec.n_test);

    Rng rng(derive_seed(spec.seed, "split", static_cast<std::uint64_t>(split_index(split))));
    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(count));

    std::vector<double> z(d_in);
    std::vector<double> jittered(d_in);
    for (int s = 0; s < count; ++s) {
        Sample sample;
        int clean = 0;
        // Latents whose class logits sit closer than min_margin to the
        // runner-up are redrawn, which keeps the class regions separable
        // from finite data.
        while (true) {
            for (std::size_t i = 0; i < d_in; ++i) {
                z[i] = rng.normal();
            }
            sample.x = Tensor({seq_len, d_in});
            for (std::size_t l = 0; l < seq_len; ++l) {
                for (std::size_t i = 0; i < d_in; ++i) {
                    jittered[i] = z[i] + rng.normal(0.0, cfg_.frame_jitter);
                }
                // frame = Q * (z + jitter) + task offset, float32 precision
                for (std::size_t r = 0; r < d_in; ++r) {
                    double acc = mu.at(r);
                    for (std::size_t c = 0; c < d_in; ++c) {
                        acc += q.at(r, c) * jittered[c];
                    }
                    sample.x.at(l, r) = as_f32(acc);
                }
            }
            // The label is a function of the emitted frames, so it can be
            // recovered exactly from stored data.
            const std::vector<double> logits = oracle_logits(task_id, sample.x);
            clean = argmax_lowest(logits);
            double runner_up = -1e300;
            for (std::size_t c = 0; c < logits.size(); ++c) {
                if (static_cast<int>(c) != clean) {
                    runner_up = std::max(runner_up, logits[c]);
                }
            }
            if (logits[static_cast<std::size_t>(clean)] - runner_up >= cfg_.min_margin) {
                break;
            }
        }
        int label = spec.label_perm[static_cast<std::size_t>(clean)];
        if (spec.noise_rho > 0.0 && rng.uniform() < spec.noise_rho) {
            const auto offset =
                1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg_.n_classes - 1)));
            label = (label + offset) % cfg_.n_classes;
        }
        sample.y = label;
        samples.push_back(std::move(sample));
    }
    return samples;
}

Tensor TaskSuite::derotated_mean(const std::string& task_id, const Tensor& x) const {
    const Tensor& q = rotation(task_id);
    const Tensor& mu = offset(task_id);
    const auto d_in = static_cast<std::size_t>(cfg_.d_in);
    if (x.rank() != 2 || x.cols() != d_in) {
        throw ShapeError("derotated_mean: sample shape " + x.shape_str());
    }
    std::vector<double> mean(d_in, 0.0);
    for (std::size_t l = 0; l < x.rows(); ++l) {
        for (std::size_t i = 0; i < d_in; ++i) {
            mean[i] += x.at(l, i);
        }
    }
    for (std::size_t i = 0; i < d_in; ++i) {
        mean[i] = mean[i] / static_cast<double>(x.rows()) - mu.at(i);
    }
    Tensor out({d_in});
    for (std::size_t r = 0; r < d_in; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d_in; ++c) {
            acc += q.at(c, r) * mean[c]; // Q^T
        }
        out.at(r) = acc;
    }
    return out;
}

std::vector<double> TaskSuite::oracle_logits(const std::string& task_id, const Tensor& x) const {
    const Tensor zbar = derotated_mean(task_id, x);
    const auto d_latent = static_cast<std::size_t>(cfg_.d_latent);
    const auto n_classes = static_cast<std::size_t>(cfg_.n_classes);
    std::vector<double> h(d_latent, 0.0);
    for (std::size_t i = 0; i < d_latent; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < zbar.numel(); ++j) {
            acc += a_.at(i, j) * zbar.at(j);
        }
        h[i] = std::tanh(acc);
    }
    std::vector<double> logits(n_classes, 0.0);
    for (std::size_t c = 0; c < n_classes; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d_latent; ++i) {
            acc += b_.at(c, i) * h[i];
        }
        logits[c] = acc;
    }
    return logits;
}

int TaskSuite::clean_label(const std::string& task_id, const Tensor& x) const {
    return argmax_lowest(oracle_logits(task_id, x));
}

int TaskSuite::oracle_predict(const std::string& task_id, const Tensor& x) const {
    const int clean = clean_label(task_id, x);
    return task(task_id).label_perm[static_cast<std::size_t>(clean)];
}

std::vector<std::vector<std::size_t>> epoch_batch_indices(std::size_t split_size,
                                                          std::size_t batch_size,
                                                          std::uint64_t epoch_seed) {
    if (batch_size == 0) {
        throw ArgumentError("epoch_batch_indices: batch_size must be >= 1");
    }
    std::vector<std::size_t> order(split_size);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(epoch_seed);
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < split_size; start += batch_size) {
        const std::size_t end = std::min(split_size, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

std::vector<std::vector<const Sample*>> epoch_batches(const std::vector<Sample>& samples,
                                                      std::size_t batch_size,
                                                      std::uint64_t epoch_seed) {
    std::vector<std::vector<const Sample*>> out;
    for (const auto& idx_batch : epoch_batch_indices(samples.size(), batch_size, epoch_seed)) {
        std::vector<const Sample*> batch;
        batch.reserve(idx_batch.size());
        for (std::size_t i : idx_batch) {
            batch.push_back(&samples[i]);
        }
        out.push_back(std::move(batch));
    }
    return out;
}

namespace {

constexpr char kMagic[5] = {'C', 'L', 'W', 'F', '1'};

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f != nullptr) {
            std::fclose(f);
        }
    }
};

} // namespace

void save_task(const TaskFileHeader& header, const std::vector<Sample>& samples,
               const std::filesystem::path& path) {
    if (header.n != static_cast<std::int64_t>(samples.size())) {
        throw ContractError("save_task: header.n=" + std::to_string(header.n) + " but " +
                            std::to_string(samples.size()) + " samples given");
    }
    json j;
    j["task_id"] = header.task_id;
    j["n"] = header.n;
    j["L"] = header.seq_len;
    j["d_in"] = header.d_in;
    j["n_classes"] = header.n_classes;
    j["seed"] = header.seed;
    j["split"] = header.split;
    const std::string head = j.dump();
    if (head.size() > 0xffffffffULL) {
        throw ArgumentError("save_task: header too large");
    }

    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.string().c_str(), "wb"));
    if (!f) {
        throw IoError("save_task: cannot open '" + path.string() + "' for writing");
    }
    const auto put = [&](const void* data, std::size_t n) {
        if (std::fwrite(data, 1, n, f.get()) != n) {
            throw IoError("save_task: short write to '" + path.string() + "'");
        }
    };
    put(kMagic, sizeof(kMagic));
    const auto head_len = static_cast<std::uint32_t>(head.size());
    unsigned char len_le[4] = {
        static_cast<unsigned char>(head_len & 0xff),
        static_cast<unsigned char>((head_len >> 8) & 0xff),
        static_cast<unsigned char>((head_len >> 16) & 0xff),
        static_cast<unsigned char>((head_len >> 24) & 0xff),
    };
    put(len_le, 4);
    put(head.data(), head.size());

    const std::size_t feat_per_sample =
        static_cast<std::size_t>(header.seq_len) * static_cast<std::size_t>(header.d_in);
    std::vector<float> feats(feat_per_sample);
    for (const Sample& s : samples) {
        if (s.x.numel() != feat_per_sample) {
            throw ContractError("save_task: sample shape " + s.x.shape_str() +
                                " does not match header");
        }
        for (std::size_t i = 0; i < feat_per_sample; ++i) {
            feats[i] = static_cast<float>(s.x.at(i));
        }
        put(feats.data(), feats.size() * sizeof(float));
    }
    for (const Sample& s : samples) {
        if (s.y < 0 || s.y >= header.n_classes) {
            throw ContractError("save_task: label " + std::to_string(s.y) + " out of range");
        }
        const auto y = static_cast<std::uint16_t>(s.y);
        unsigned char y_le[2] = {static_cast<unsigned char>(y & 0xff),
                                 static_cast<unsigned char>((y >> 8) & 0xff)};
        put(y_le, 2);
    }
}

std::pair<TaskFileHeader, std::vector<Sample>> load_task(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.string().c_str(), "rb"));
    if (!f) {
        throw IoError("load_task: cannot open '" + path.string() + "'");
    }
    char magic[5];
    if (std::fread(magic, 1, 5, f.get()) != 5 || std::memcmp(magic, kMagic, 5) != 0) {
        throw FormatError("load_task: bad magic in '" + path.string() + "'");
    }
    unsigned char len_le[4];
    if (std::fread(len_le, 1, 4, f.get()) != 4) {
        throw FormatError("load_task: truncated header length in '" + path.string() + "'");
    }
    const std::uint32_t head_len = static_cast<std::uint32_t>(len_le[0]) |
                                   (static_cast<std::uint32_t>(len_le[1]) << 8) |
                                   (static_cast<std::uint32_t>(len_le[2]) << 16) |
                                   (static_cast<std::uint32_t>(len_le[3]) << 24);
    std::string head(head_len, '\0');
    if (std::fread(head.data(), 1, head_len, f.get()) != head_len) {
        throw FormatError("load_task: truncated header in '" + path.string() + "'");
    }
    TaskFileHeader header;
    try {
        const json j = json::parse(head);
        header.task_id = j.at("task_id").get<std::string>();
        header.n = j.at("n").get<std::int64_t>();
        header.seq_len = j.at("L").get<int>();
        header.d_in = j.at("d_in").get<int>();
        header.n_classes = j.at("n_classes").get<int>();
        header.seed = j.at("seed").get<std::uint64_t>();
        header.split = j.at("split").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError("load_task: invalid header in '" + path.string() + "': " + e.what());
    }
    if (header.n < 0 || header.seq_len < 1 || header.d_in < 1 || header.n_classes < 1) {
        throw FormatError("load_task: nonsensical header fields in '" + path.string() + "'");
    }

    const std::size_t feat_per_sample =
        static_cast<std::size_t>(header.seq_len) * static_cast<std::size_t>(header.d_in);
    const auto n = static_cast<std::size_t>(header.n);

    // The payload length must match the header exactly.
    const long payload_start = std::ftell(f.get());
    std::fseek(f.get(), 0, SEEK_END);
    const long file_end = std::ftell(f.get());
    std::fseek(f.get(), payload_start, SEEK_SET);
    const std::size_t expected = n * feat_per_sample * sizeof(float) + n * 2;
    const auto actual = static_cast<std::size_t>(file_end - payload_start);
    if (actual < expected) {
        throw FormatError("load_task: truncated payload in '" + path.string() + "' (" +
                          std::to_string(actual) + " of " + std::to_string(expected) + " bytes)");
    }
    if (actual > expected) {
        throw FormatError("load_task: payload length mismatch in '" + path.string() + "' (" +
                          std::to_string(actual) + " bytes for declared " +
                          std::to_string(expected) + ")");
    }

    std::vector<Sample> samples;
    samples.reserve(n);
    std::vector<float> feats(feat_per_sample);
    for (std::size_t s = 0; s < n; ++s) {
        if (std::fread(feats.data(), sizeof(float), feat_per_sample, f.get()) != feat_per_sample) {
            throw FormatError("load_task: truncated payload in '" + path.string() + "'");
        }
        Sample sample;
        sample.x = Tensor({static_cast<std::size_t>(header.seq_len),
                           static_cast<std::size_t>(header.d_in)});
        for (std::size_t i = 0; i < feat_per_sample; ++i) {
            sample.x.at(i) = static_cast<double>(feats[i]);
        }
        samples.push_back(std::move(sample));
    }
    for (std::size_t s = 0; s < n; ++s) {
        unsigned char y_le[2];
        if (std::fread(y_le, 1, 2, f.get()) != 2) {
            throw FormatError("load_task: truncated labels in '" + path.string() + "'");
        }
        const int y = static_cast<int>(y_le[0]) | (static_cast<int>(y_le[1]) << 8);
        if (y >= header.n_classes) {
            throw FormatError("load_task: label out of range in '" + path.string() + "'");
        }
        samples[s].y = y;
    }
    return {std::move(header), std::move(samples)};
}

} // namespace clwf
