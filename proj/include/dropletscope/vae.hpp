#pragma once

// Gaussian VAE with a 3-D latent space: MLP encoder trunk with mean and
// log-variance heads, MLP decoder, reparameterized single-sample NELBO with
// the closed-form KL term, exact reverse-mode gradients and Adam.

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dropletscope::vae {

inline constexpr std::size_t kLatentDim = 3;

enum class Activation : std::uint8_t { Identity = 0, Silu = 1 };

struct DenseLayer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;    // out
    Activation activation = Activation::Identity;

    Eigen::Index in_dim() const { return weight.cols(); }
    Eigen::Index out_dim() const { return weight.rows(); }
};

struct MlpParams {
    std::vector<DenseLayer> layers;

    Eigen::Index in_dim() const { return layers.front().in_dim(); }
    Eigen::Index out_dim() const { return layers.back().out_dim(); }
};

/// Throws InvalidArgument on a dimension mismatch.
Eigen::VectorXd mlp_forward(const MlpParams& params, const Eigen::VectorXd& x);

/// First and second moment estimates, one entry per layer in canonical order.
struct AdamState {
    std::uint64_t step = 0;
    std::vector<DenseLayer> m;
    std::vector<DenseLayer> v;
};

struct VaeModel {
    MlpParams encoder_trunk;
    DenseLayer head_mean;    // trunk output -> latent mean
    DenseLayer head_logvar;  // trunk output -> latent log-variance
    MlpParams decoder;       // latent -> reconstruction
    double beta = 1e-3;
    std::uint64_t seed = 0;
    std::optional<AdamState> adam;

    Eigen::Index input_dim() const { return encoder_trunk.in_dim(); }
    Eigen::Index latent_dim() const { return head_mean.out_dim(); }

    /// Layers in checkpoint order: trunk, mean head, log-variance head, decoder.
    std::vector<DenseLayer*> layers();
    std::vector<const DenseLayer*> layers() const;
};

/// Per-layer gradients congruent with VaeModel::layers().
using Gradients = std::vector<DenseLayer>;

struct Architecture {
    std::size_t input_dim = 33;
    std::size_t latent_dim = kLatentDim;
    std::vector<std::size_t> encoder_hidden = {64, 64};
    std::vector<std::size_t> decoder_hidden = {64, 64};
};

/// Glorot-uniform weights, zero biases, SiLU hidden layers, identity outputs.
VaeModel make_model(const Architecture& arch, std::uint64_t seed);

/// Structural check: chained dimensions, 3-D latent, matching input/output.
/// Throws InvalidArgument.
void validate_model(const VaeModel& model);

struct Encoding {
    Eigen::Vector3d mu;
    Eigen::Vector3d logvar;
};

/// Deterministic; throws InvalidData on non-finite input.
Encoding encode(const VaeModel& model, std::span<const double> x);
Eigen::VectorXd decode(const VaeModel& model, const Eigen::Vector3d& z);

Eigen::Vector3d reparameterize(const Eigen::Vector3d& mu, const Eigen::Vector3d& logvar, const Eigen::Vector3d& eps);

/// KL(N(mu, diag(exp(logvar))) || N(0, I)) in closed form.
double kl_gauss(const Eigen::Vector3d& mu, const Eigen::Vector3d& logvar);

struct NelboParts {
    double loss = 0.0;
    double recon = 0.0;
    double kl = 0.0;
};

/// loss = 1/2 |x - decode(mu + sigma * eps)|^2 + beta * KL. With several eps
/// columns the reconstruction term is averaged over them.
NelboParts nelbo(const VaeModel& model, std::span<const double> x, const Eigen::Matrix3Xd& eps, double beta);
NelboParts nelbo(const VaeModel& model, std::span<const double> x, const Eigen::Vector3d& eps, double beta);

/// Batch form: columns of `x` are samples, columns of `eps` the matching
/// noise draws. Loss terms are means over columns; gradients are those of the
/// mean loss. Throws NumericFailure naming the stage that went non-finite.
NelboParts nelbo_batch(const VaeModel& model, const Eigen::MatrixXd& x, const Eigen::MatrixXd& eps, double beta,
                       Gradients* grads);

/// Exact gradient of nelbo() with respect to every parameter.
Gradients backward(const VaeModel& model, std::span<const double> x, const Eigen::Vector3d& eps, double beta);

Gradients zero_gradients(const VaeModel& model);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// One bias-corrected Adam update at step t (1-based). Creates a zeroed
/// state on first use. Throws InvalidArgument on shape mismatch or t == 0.
void adam_step(VaeModel& model, const Gradients& grads, AdamState& state, std::uint64_t t, const AdamConfig& cfg);

struct TrainConfig {
    double beta = 1e-3;
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    std::size_t n_epochs = 20;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::uint64_t seed = 1;
    std::size_t mc_samples = 1;
    Architecture architecture;
};

struct EpochStats {
    std::size_t epoch = 0;  // 1-based
    double mean_nelbo = 0.0;
    double mean_recon = 0.0;
    double mean_kl = 0.0;
};

struct TrainResult {
    VaeModel model;
    std::vector<EpochStats> history;
};

/// Columns of `samples` are unit-sum Dsds. Serial and deterministic given
/// cfg.seed. The returned parameters and Adam moments are rounded to f32 so
/// the in-memory model equals its checkpoint. If `initial` is given training
/// starts from it instead of a fresh model.
TrainResult train(const Eigen::MatrixXd& samples, const TrainConfig& cfg, std::optional<VaeModel> initial = std::nullopt,
                  const std::function<void(const EpochStats&)>& on_epoch = {});

/// Rounds all parameters (and Adam moments) through f32.
void round_to_f32(VaeModel& model);

/// Applies z -> sign .* z[perm] to the latent space. Signed permutations are
/// exact symmetries of the model: the NELBO of every input is unchanged.
void permute_latent(VaeModel& model, const std::array<int, 3>& perm, const std::array<double, 3>& sign);

struct LatentOrientation {
    std::array<int, 3> perm{0, 1, 2};
    std::array<double, 3> sign{1.0, 1.0, 1.0};
    Eigen::Vector3d shift = Eigen::Vector3d::Zero();  // late minus early mean, after orientation
};

/// Fixes the arbitrary orientation of a trained latent space. With shift =
/// mean mu(late) - mean mu(early), the axis with the largest |shift| becomes
/// dimension 1 with a negative shift; the other two keep their order and get
/// non-negative shifts. Columns of `early` and `late` are samples.
LatentOrientation orient_latent(VaeModel& model, const Eigen::MatrixXd& early, const Eigen::MatrixXd& late);

struct GradCheckReport {
    std::size_t probes = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    bool passed = false;
};

using GradientFn = std::function<Gradients(const VaeModel&, std::span<const double>, const Eigen::Vector3d&, double)>;

/// Compares analytic gradients with central differences at `n_probes`
/// randomly chosen parameters, each on its own random input and noise draw.
/// Relative error is |a - n| / max(|a|, |n|, abs_floor).
GradCheckReport grad_check(const VaeModel& model, std::size_t n_probes, double h, double tolerance, double beta,
                           std::uint64_t seed, const GradientFn& gradient = {}, double abs_floor = 1e-8);

/// VAE1 checkpoint format.
std::string encode_checkpoint(const VaeModel& model);
VaeModel decode_checkpoint(std::string_view bytes, const std::string& context = "VAE1");
void checkpoint_save(const VaeModel& model, const std::filesystem::path& path);
VaeModel checkpoint_load(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace dropletscope::vae
