#pragma once

// Pipeline stages behind the command-line tool. Every stage works inside a
// workspace directory, reads the artifacts of earlier stages from their fixed
// locations and writes its own outputs, a resolved copy of the config and a
// stage record (stage.txt) holding FNV-1a hashes of what it read and wrote.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dropletscope/compose.hpp"
#include "dropletscope/core.hpp"
#include "dropletscope/path.hpp"
#include "dropletscope/synth.hpp"
#include "dropletscope/vae.hpp"
#include "dropletscope/viz.hpp"

namespace dropletscope::pipeline {

/// A stage input is missing or older than the artifacts built from it.
class StageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat `key = value` settings. Keys are `section.name`; a `[section]` line in
/// a config file prefixes the keys that follow it.
class Config {
public:
    /// Every key with its default value.
    Config();

    /// Throws InvalidArgument naming the key when it is unknown or the value
    /// does not parse as the key's type.
    void set(const std::string& key, const std::string& value);
    void load_file(const std::filesystem::path& path);
    /// Parses `key=value`.
    void apply_override(const std::string& assignment);

    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    std::uint64_t get_uint(const std::string& key) const;
    std::vector<double> get_list(const std::string& key) const;

    /// Sorted `key = value` lines.
    std::string resolved() const;
    std::vector<std::string> keys() const;

private:
    std::map<std::string, std::string> values_;
};

synth::SynthConfig synth_config(const Config& cfg, double aerosol_factor);
vae::TrainConfig train_config(const Config& cfg);

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

/// Snapshot loaded from a manifest; entry.path as resolved by read_manifest.
struct LoadedSnapshot {
    synth::ManifestEntry entry;
    SnapshotField field;
};

std::vector<LoadedSnapshot> load_dataset(const std::filesystem::path& manifest);

/// Cells of all snapshots as columns, each re-normalized in double precision.
Eigen::MatrixXd sample_matrix(std::span<const LoadedSnapshot> snapshots);
Eigen::MatrixXd sample_matrix(std::span<const SnapshotField> fields);

/// The first `early_fraction` and last `late_fraction` of the distinct time
/// steps, at least one step each. Throws InvalidArgument for fractions
/// outside (0, 1] or no times.
struct TimeSplit {
    std::vector<double> early;
    std::vector<double> late;
    bool is_early(double t) const;
    bool is_late(double t) const;
};
TimeSplit split_times(std::vector<double> times, double early_fraction, double late_fraction);

/// Training followed by latent orientation on the early/late split.
struct TrainOutcome {
    vae::TrainResult result;
    vae::LatentOrientation orientation;
};
/// With orient == false the orientation is the identity.
TrainOutcome train_and_orient(std::span<const LoadedSnapshot> data, const vae::TrainConfig& tcfg, bool orient,
                              double early_fraction, double late_fraction,
                              const std::function<void(const vae::EpochStats&)>& on_epoch = {});

void write_loss_csv(std::span<const vae::EpochStats> history, const std::filesystem::path& path);

struct EmbeddedSnapshot {
    std::filesystem::path lat_path;  // relative to the workspace
    std::filesystem::path snapshot;  // relative to the workspace
    viz::Embedding embedding;
};

/// Reads embed/manifest.txt: `<lat> <time_s> <aerosol> <snapshot>` per line.
std::vector<EmbeddedSnapshot> load_embeddings(const std::filesystem::path& work);

struct TraceOutcome {
    path::LatentPath path;
    std::vector<path::PathSample> samples;
    std::size_t n_records = 0;
    std::size_t k = 0;
};

/// Novelty-weighted path fit over the pooled records of `embeddings` (or the
/// given waypoints, resampled to path.n_nodes) and k-NN averaged Dsds along
/// it. `dsds` hold one unit-sum Dsd per pooled record, in embedding order.
/// path.aerosol > 0 restricts everything to that run.
TraceOutcome trace_path(std::span<const viz::Embedding> embeddings, std::span<const Dsd> dsds, const Config& cfg,
                        const std::optional<std::vector<Eigen::Vector3d>>& waypoints);

/// Stage record helpers.
struct StageRecord {
    std::string stage;  // command name
    std::vector<std::pair<std::string, std::string>> inputs;   // relative path, hash
    std::vector<std::pair<std::string, std::string>> outputs;  // relative path, hash
};
StageRecord read_stage_record(const std::filesystem::path& work, const std::string& stage_dir);
/// Throws StageError if the stage never ran, if one of its outputs changed
/// after it ran, or if one of its inputs changed since (stale outputs).
StageRecord require_stage(const std::filesystem::path& work, const std::string& stage_dir);

// Stages. Each validates its prerequisites and throws StageError naming the
// missing or stale artifact.
void cmd_gen(const Config& cfg, const std::filesystem::path& work, const std::optional<double>& only_aerosol = {});
void cmd_train(const Config& cfg, const std::filesystem::path& work);
void cmd_embed(const Config& cfg, const std::filesystem::path& work);
void cmd_calibrate(const Config& cfg, const std::filesystem::path& work);
void cmd_render(const Config& cfg, const std::filesystem::path& work);
void cmd_trace(const Config& cfg, const std::filesystem::path& work,
               const std::optional<std::filesystem::path>& waypoints = {});
void cmd_compose(const Config& cfg, const std::filesystem::path& work);
std::vector<compose::OnsetRow> cmd_onset(const Config& cfg, const std::filesystem::path& work);

/// Command-line entry point. Exit codes: 0 success, 2 usage, 3 data or
/// format problem, 4 numeric failure.
int run_cli(int argc, const char* const* argv);

}  // namespace dropletscope::pipeline
