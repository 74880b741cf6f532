#include "dropletscope/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dropletscope/binio.hpp"
#include "dropletscope/error.hpp"
#include "dropletscope/rng.hpp"

namespace dropletscope::vae {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

void activate(Activation act, MatrixXd& m) {
    if (act == Activation::Silu) m.array() = m.array() / (1.0 + (-m.array()).exp());
}

/// Derivative of the activation evaluated at the pre-activation values.
MatrixXd activation_slope(Activation act, const MatrixXd& pre) {
    if (act == Activation::Identity) return MatrixXd::Ones(pre.rows(), pre.cols());
    const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-pre.array()).exp());
    return (sig * (1.0 + pre.array() * (1.0 - sig))).matrix();
}

struct LayerTape {
    MatrixXd input;
    MatrixXd pre;
};

MatrixXd layer_forward(const DenseLayer& layer, const MatrixXd& in, LayerTape* tape) {
    MatrixXd a = layer.weight * in;
    a.colwise() += layer.bias;
    if (tape != nullptr) {
        tape->input = in;
        tape->pre = a;
    }
    activate(layer.activation, a);
    return a;
}

/// Given dLoss/dOutput, writes parameter gradients and returns dLoss/dInput.
MatrixXd layer_backward(const DenseLayer& layer, const LayerTape& tape, const MatrixXd& d_out, DenseLayer& grad) {
    const MatrixXd d_pre = layer.activation == Activation::Identity
                               ? d_out
                               : MatrixXd(d_out.cwiseProduct(activation_slope(layer.activation, tape.pre)));
    grad.weight.noalias() = d_pre * tape.input.transpose();
    grad.bias = d_pre.rowwise().sum();
    return layer.weight.transpose() * d_pre;
}

DenseLayer zeros_like(const DenseLayer& layer) {
    return DenseLayer{MatrixXd::Zero(layer.weight.rows(), layer.weight.cols()), VectorXd::Zero(layer.bias.size()),
                      layer.activation};
}

DenseLayer glorot_layer(std::size_t in, std::size_t out, Activation act, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    DenseLayer layer{MatrixXd(out, in), VectorXd::Zero(static_cast<Eigen::Index>(out)), act};
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = u(rng);
    }
    return layer;
}

bool all_finite(const MatrixXd& m) { return m.allFinite(); }

}  // namespace

std::vector<DenseLayer*> VaeModel::layers() {
    std::vector<DenseLayer*> out;
    for (auto& l : encoder_trunk.layers) out.push_back(&l);
    out.push_back(&head_mean);
    out.push_back(&head_logvar);
    for (auto& l : decoder.layers) out.push_back(&l);
    return out;
}

std::vector<const DenseLayer*> VaeModel::layers() const {
    std::vector<const DenseLayer*> out;
    for (const auto& l : encoder_trunk.layers) out.push_back(&l);
    out.push_back(&head_mean);
    out.push_back(&head_logvar);
    for (const auto& l : decoder.layers) out.push_back(&l);
    return out;
}

VectorXd mlp_forward(const MlpParams& params, const VectorXd& x) {
    if (params.layers.empty()) throw InvalidArgument("mlp_forward: no layers");
    if (x.size() != params.in_dim()) {
        throw InvalidArgument("mlp_forward: input has " + std::to_string(x.size()) + " entries, expected " +
                              std::to_string(params.in_dim()));
    }
    MatrixXd h = x;
    for (const DenseLayer& layer : params.layers) {
        if (layer.in_dim() != h.rows()) throw InvalidArgument("mlp_forward: layer dimensions do not chain");
        h = layer_forward(layer, h, nullptr);
    }
    return h.col(0);
}

VaeModel make_model(const Architecture& arch, std::uint64_t seed) {
    if (arch.latent_dim != kLatentDim) throw InvalidArgument("make_model: latent dimension must be 3");
    if (arch.input_dim == 0) throw InvalidArgument("make_model: input dimension must be >= 1");
    std::mt19937_64 rng(derive_seed(seed, {0x1417}));
    VaeModel model;
    std::size_t width = arch.input_dim;
    for (std::size_t h : arch.encoder_hidden) {
        model.encoder_trunk.layers.push_back(glorot_layer(width, h, Activation::Silu, rng));
        width = h;
    }
    if (model.encoder_trunk.layers.empty()) throw InvalidArgument("make_model: encoder needs a hidden layer");
    model.head_mean = glorot_layer(width, arch.latent_dim, Activation::Identity, rng);
    model.head_logvar = glorot_layer(width, arch.latent_dim, Activation::Identity, rng);
    width = arch.latent_dim;
    for (std::size_t h : arch.decoder_hidden) {
        model.decoder.layers.push_back(glorot_layer(width, h, Activation::Silu, rng));
        width = h;
    }
    model.decoder.layers.push_back(glorot_layer(width, arch.input_dim, Activation::Identity, rng));
    model.seed = seed;
    return model;
}

void validate_model(const VaeModel& model) {
    const auto fail = [](const std::string& why) { throw InvalidArgument("invalid VAE structure: " + why); };
    if (model.encoder_trunk.layers.empty() || model.decoder.layers.empty()) fail("empty encoder or decoder");
    for (const DenseLayer* l : model.layers()) {
        if (l->bias.size() != l->weight.rows()) fail("bias length differs from weight rows");
    }
    const auto chain = [&](const MlpParams& p, const char* name) {
        for (std::size_t i = 1; i < p.layers.size(); ++i) {
            if (p.layers[i].in_dim() != p.layers[i - 1].out_dim()) fail(std::string(name) + " layers do not chain");
        }
    };
    chain(model.encoder_trunk, "encoder");
    chain(model.decoder, "decoder");
    const Eigen::Index trunk_out = model.encoder_trunk.out_dim();
    if (model.head_mean.in_dim() != trunk_out || model.head_logvar.in_dim() != trunk_out) {
        fail("heads do not match trunk output");
    }
    if (model.head_mean.out_dim() != static_cast<Eigen::Index>(kLatentDim) ||
        model.head_logvar.out_dim() != static_cast<Eigen::Index>(kLatentDim)) {
        fail("latent dimension must be 3");
    }
    if (model.decoder.in_dim() != static_cast<Eigen::Index>(kLatentDim)) fail("decoder input must be 3");
    if (model.decoder.out_dim() != model.encoder_trunk.in_dim()) fail("decoder output differs from encoder input");
}

Encoding encode(const VaeModel& model, std::span<const double> x) {
    if (static_cast<Eigen::Index>(x.size()) != model.input_dim()) throw InvalidArgument("encode: input size mismatch");
    for (double v : x) {
        if (!std::isfinite(v)) throw InvalidData("encode: non-finite input");
    }
    MatrixXd h = Eigen::Map<const VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    for (const DenseLayer& layer : model.encoder_trunk.layers) h = layer_forward(layer, h, nullptr);
    Encoding e;
    e.mu = layer_forward(model.head_mean, h, nullptr).col(0);
    e.logvar = layer_forward(model.head_logvar, h, nullptr).col(0);
    return e;
}

VectorXd decode(const VaeModel& model, const Eigen::Vector3d& z) {
    MatrixXd g = z;
    for (const DenseLayer& layer : model.decoder.layers) g = layer_forward(layer, g, nullptr);
    return g.col(0);
}

Eigen::Vector3d reparameterize(const Eigen::Vector3d& mu, const Eigen::Vector3d& logvar, const Eigen::Vector3d& eps) {
    return mu + (0.5 * logvar.array()).exp().matrix().cwiseProduct(eps);
}

double kl_gauss(const Eigen::Vector3d& mu, const Eigen::Vector3d& logvar) {
    double kl = 0.0;
    for (int j = 0; j < 3; ++j) kl += mu[j] * mu[j] + std::exp(logvar[j]) - 1.0 - logvar[j];
    return 0.5 * kl;
}

Gradients zero_gradients(const VaeModel& model) {
    Gradients g;
    for (const DenseLayer* l : model.layers()) g.push_back(zeros_like(*l));
    return g;
}

NelboParts nelbo_batch(const VaeModel& model, const MatrixXd& x, const MatrixXd& eps, double beta, Gradients* grads) {
    const Eigen::Index n = x.cols();
    if (n == 0 || eps.cols() != n || eps.rows() != static_cast<Eigen::Index>(kLatentDim)) {
        throw InvalidArgument("nelbo: need one 3-D noise column per sample");
    }
    if (x.rows() != model.input_dim()) throw InvalidArgument("nelbo: input size mismatch");

    const std::size_t n_trunk = model.encoder_trunk.layers.size();
    const std::size_t n_dec = model.decoder.layers.size();
    std::vector<LayerTape> trunk_tape(n_trunk), dec_tape(n_dec);

    MatrixXd h = x;
    for (std::size_t i = 0; i < n_trunk; ++i) h = layer_forward(model.encoder_trunk.layers[i], h, &trunk_tape[i]);
    const MatrixXd mu = layer_forward(model.head_mean, h, nullptr);
    const MatrixXd logvar = layer_forward(model.head_logvar, h, nullptr);
    if (!all_finite(mu) || !all_finite(logvar)) throw NumericFailure("nelbo: encoder produced non-finite output");

    const MatrixXd sigma = (0.5 * logvar.array()).exp().matrix();
    MatrixXd g = mu + sigma.cwiseProduct(eps);
    if (!all_finite(g)) throw NumericFailure("nelbo: reparameterized latent is non-finite");
    for (std::size_t i = 0; i < n_dec; ++i) g = layer_forward(model.decoder.layers[i], g, &dec_tape[i]);
    if (!all_finite(g)) throw NumericFailure("nelbo: decoder produced non-finite output");

    const MatrixXd residual = g - x;
    const double inv_n = 1.0 / static_cast<double>(n);
    NelboParts parts;
    parts.recon = 0.5 * residual.squaredNorm() * inv_n;
    const Eigen::ArrayXXd var = logvar.array().exp();
    parts.kl = 0.5 * (mu.array().square() + var - 1.0 - logvar.array()).sum() * inv_n;
    parts.loss = parts.recon + beta * parts.kl;
    if (!std::isfinite(parts.loss)) throw NumericFailure("nelbo: loss is non-finite");

    if (grads == nullptr) return parts;

    Gradients& gr = *grads;
    gr.resize(n_trunk + 2 + n_dec);
    MatrixXd d = residual * inv_n;
    for (std::size_t i = n_dec; i-- > 0;) {
        d = layer_backward(model.decoder.layers[i], dec_tape[i], d, gr[n_trunk + 2 + i]);
    }
    // d is now dLoss/dz.
    const MatrixXd d_mu = d + (beta * inv_n) * mu;
    const MatrixXd d_logvar =
        (d.array() * eps.array() * 0.5 * sigma.array() + (0.5 * beta * inv_n) * (var - 1.0)).matrix();

    DenseLayer& gm = gr[n_trunk];
    DenseLayer& gv = gr[n_trunk + 1];
    gm.weight.noalias() = d_mu * h.transpose();
    gm.bias = d_mu.rowwise().sum();
    gv.weight.noalias() = d_logvar * h.transpose();
    gv.bias = d_logvar.rowwise().sum();
    gm.activation = gv.activation = Activation::Identity;

    MatrixXd dh = model.head_mean.weight.transpose() * d_mu + model.head_logvar.weight.transpose() * d_logvar;
    for (std::size_t i = n_trunk; i-- > 0;) {
        dh = layer_backward(model.encoder_trunk.layers[i], trunk_tape[i], dh, gr[i]);
    }
    const auto all = model.layers();
    for (std::size_t i = 0; i < gr.size(); ++i) gr[i].activation = all[i]->activation;
    return parts;
}

NelboParts nelbo(const VaeModel& model, std::span<const double> x, const Eigen::Matrix3Xd& eps, double beta) {
    const Eigen::Map<const VectorXd> col(x.data(), static_cast<Eigen::Index>(x.size()));
    MatrixXd xs = col.replicate(1, eps.cols());
    return nelbo_batch(model, xs, eps, beta, nullptr);
}

NelboParts nelbo(const VaeModel& model, std::span<const double> x, const Eigen::Vector3d& eps, double beta) {
    return nelbo(model, x, Eigen::Matrix3Xd(eps), beta);
}

Gradients backward(const VaeModel& model, std::span<const double> x, const Eigen::Vector3d& eps, double beta) {
    const MatrixXd xs = Eigen::Map<const VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    Gradients g;
    nelbo_batch(model, xs, MatrixXd(eps), beta, &g);
    return g;
}

void adam_step(VaeModel& model, const Gradients& grads, AdamState& state, std::uint64_t t, const AdamConfig& cfg) {
    if (t == 0) throw InvalidArgument("adam_step: step index is 1-based");
    auto params = model.layers();
    if (grads.size() != params.size()) throw InvalidArgument("adam_step: gradient layer count mismatch");
    if (state.m.empty()) {
        for (const DenseLayer* p : params) {
            state.m.push_back(zeros_like(*p));
            state.v.push_back(zeros_like(*p));
        }
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw InvalidArgument("adam_step: state layer count mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const DenseLayer& g = grads[i];
        if (g.weight.rows() != params[i]->weight.rows() || g.weight.cols() != params[i]->weight.cols() ||
            g.bias.size() != params[i]->bias.size() || state.m[i].weight.size() != g.weight.size() ||
            state.m[i].bias.size() != g.bias.size()) {
            throw InvalidArgument("adam_step: shape mismatch in layer " + std::to_string(i));
        }
    }
    const double td = static_cast<double>(t);
    const double c1 = 1.0 - std::pow(cfg.beta1, td);
    const double c2 = 1.0 - std::pow(cfg.beta2, td);
    const auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
        m.array() = cfg.beta1 * m.array() + (1.0 - cfg.beta1) * grad.array();
        v.array() = cfg.beta2 * v.array() + (1.0 - cfg.beta2) * grad.array().square();
        param.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
        update(params[i]->weight, grads[i].weight, state.m[i].weight, state.v[i].weight);
        update(params[i]->bias, grads[i].bias, state.m[i].bias, state.v[i].bias);
    }
    state.step = t;
}

void round_to_f32(VaeModel& model) {
    const auto round = [](auto& m) { m = m.template cast<float>().template cast<double>(); };
    for (DenseLayer* l : model.layers()) {
        round(l->weight);
        round(l->bias);
    }
    if (model.adam) {
        for (auto* moments : {&model.adam->m, &model.adam->v}) {
            for (DenseLayer& l : *moments) {
                round(l.weight);
                round(l.bias);
            }
        }
    }
}

TrainResult train(const MatrixXd& samples, const TrainConfig& cfg, std::optional<VaeModel> initial,
                  const std::function<void(const EpochStats&)>& on_epoch) {
    if (samples.cols() == 0) throw InvalidArgument("train: empty dataset");
    if (cfg.batch_size == 0) throw InvalidArgument("train: batch_size must be >= 1");
    if (cfg.mc_samples == 0) throw InvalidArgument("train: mc_samples must be >= 1");
    if (!(cfg.beta >= 0.0)) throw InvalidArgument("train: beta must be >= 0");
    if (!(cfg.learning_rate >= 0.0)) throw InvalidArgument("train: learning rate must be >= 0");

    TrainResult result;
    result.model = initial ? std::move(*initial) : make_model(cfg.architecture, cfg.seed);
    VaeModel& model = result.model;
    validate_model(model);
    if (samples.rows() != model.input_dim()) throw InvalidArgument("train: sample size differs from model input");
    model.beta = cfg.beta;
    model.seed = cfg.seed;
    AdamState state = model.adam.value_or(AdamState{});

    const AdamConfig adam{cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon};
    const auto n = static_cast<std::size_t>(samples.cols());
    const auto mc = static_cast<Eigen::Index>(cfg.mc_samples);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Gradients grads;

    for (std::size_t epoch = 1; epoch <= cfg.n_epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(cfg.seed, {0xE90C, epoch}));
        std::shuffle(order.begin(), order.end(), rng);
        std::normal_distribution<double> gauss(0.0, 1.0);
        double sum_loss = 0.0, sum_recon = 0.0, sum_kl = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
            const std::size_t count = std::min(cfg.batch_size, n - start);
            const auto cols = static_cast<Eigen::Index>(count) * mc;
            MatrixXd xb(samples.rows(), cols);
            MatrixXd eps(static_cast<Eigen::Index>(kLatentDim), cols);
            for (std::size_t b = 0; b < count; ++b) {
                for (Eigen::Index s = 0; s < mc; ++s) xb.col(static_cast<Eigen::Index>(b) * mc + s) = samples.col(static_cast<Eigen::Index>(order[start + b]));
            }
            for (Eigen::Index c = 0; c < cols; ++c) {
                for (Eigen::Index r = 0; r < eps.rows(); ++r) eps(r, c) = gauss(rng);
            }
            NelboParts parts;
            try {
                parts = nelbo_batch(model, xb, eps, cfg.beta, &grads);
            } catch (const NumericFailure& e) {
                throw NumericFailure("train: diverged at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batch_index) + ": " + e.what());
            }
            adam_step(model, grads, state, state.step + 1, adam);
            const auto w = static_cast<double>(count);
            sum_loss += parts.loss * w;
            sum_recon += parts.recon * w;
            sum_kl += parts.kl * w;
        }
        const EpochStats stats{epoch, sum_loss / static_cast<double>(n), sum_recon / static_cast<double>(n),
                               sum_kl / static_cast<double>(n)};
        result.history.push_back(stats);
        if (on_epoch) on_epoch(stats);
    }
    model.adam = std::move(state);
    round_to_f32(model);
    return result;
}

void permute_latent(VaeModel& model, const std::array<int, 3>& perm, const std::array<double, 3>& sign) {
    std::array<bool, 3> seen{};
    for (int p : perm) {
        if (p < 0 || p > 2 || seen[static_cast<std::size_t>(p)]) throw InvalidArgument("permute_latent: not a permutation");
        seen[static_cast<std::size_t>(p)] = true;
    }
    for (double s : sign) {
        if (s != 1.0 && s != -1.0) throw InvalidArgument("permute_latent: signs must be +-1");
    }
    // z'_d = sign_d * z_perm[d]: mean rows are permuted and signed, log-variance
    // rows permuted, decoder input columns permuted and signed.
    const auto rows = [&](DenseLayer& l, bool with_sign) {
        const DenseLayer old = l;
        for (int d = 0; d < 3; ++d) {
            const double s = with_sign ? sign[static_cast<std::size_t>(d)] : 1.0;
            l.weight.row(d) = s * old.weight.row(perm[static_cast<std::size_t>(d)]);
            l.bias(d) = s * old.bias(perm[static_cast<std::size_t>(d)]);
        }
    };
    const auto cols = [&](DenseLayer& l, bool with_sign) {
        const DenseLayer old = l;
        for (int d = 0; d < 3; ++d) {
            const double s = with_sign ? sign[static_cast<std::size_t>(d)] : 1.0;
            l.weight.col(d) = s * old.weight.col(perm[static_cast<std::size_t>(d)]);
        }
    };
    rows(model.head_mean, true);
    rows(model.head_logvar, false);
    cols(model.decoder.layers.front(), true);
    if (model.adam && !model.adam->m.empty()) {
        const std::size_t t = model.encoder_trunk.layers.size();
        const std::size_t dec0 = t + 2;
        rows(model.adam->m[t], true);
        rows(model.adam->v[t], false);
        rows(model.adam->m[t + 1], false);
        rows(model.adam->v[t + 1], false);
        cols(model.adam->m[dec0], true);
        cols(model.adam->v[dec0], false);
    }
}

namespace {

Eigen::Vector3d mean_encoding(const VaeModel& model, const Eigen::MatrixXd& x) {
    if (x.cols() == 0) throw InvalidArgument("orient_latent: empty sample set");
    if (x.rows() != model.input_dim()) throw InvalidArgument("orient_latent: sample width differs from the model");
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        sum += encode(model, std::span<const double>(x.col(c).data(), static_cast<std::size_t>(x.rows()))).mu;
    }
    return sum / static_cast<double>(x.cols());
}

}  // namespace

LatentOrientation orient_latent(VaeModel& model, const Eigen::MatrixXd& early, const Eigen::MatrixXd& late) {
    const Eigen::Vector3d shift = mean_encoding(model, late) - mean_encoding(model, early);
    LatentOrientation o;
    int lead = 0;
    shift.cwiseAbs().maxCoeff(&lead);
    o.perm[0] = lead;
    std::size_t slot = 1;
    for (int d = 0; d < 3; ++d) {
        if (d != lead) o.perm[slot++] = d;
    }
    for (std::size_t d = 0; d < 3; ++d) {
        const double v = shift(o.perm[d]);
        o.sign[d] = d == 0 ? (v > 0.0 ? -1.0 : 1.0) : (v < 0.0 ? -1.0 : 1.0);
        o.shift(static_cast<Eigen::Index>(d)) = o.sign[d] * v;
    }
    permute_latent(model, o.perm, o.sign);
    return o;
}

GradCheckReport grad_check(const VaeModel& model, std::size_t n_probes, double h, double tolerance, double beta,
                           std::uint64_t seed, const GradientFn& gradient, double abs_floor) {
    if (!(h > 0.0)) throw InvalidArgument("grad_check: h must be > 0");
    if (n_probes == 0) throw InvalidArgument("grad_check: need at least one probe");
    const GradientFn grad_fn = gradient ? gradient : GradientFn(backward);

    const auto layers = model.layers();
    std::vector<std::size_t> offsets{0};
    for (const DenseLayer* l : layers) {
        offsets.push_back(offsets.back() + static_cast<std::size_t>(l->weight.size() + l->bias.size()));
    }
    std::mt19937_64 rng(derive_seed(seed, {0x6C6B}));
    std::uniform_int_distribution<std::size_t> pick(0, offsets.back() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    GradCheckReport report;
    report.probes = n_probes;
    VaeModel probe = model;
    auto probe_layers = probe.layers();
    for (std::size_t p = 0; p < n_probes; ++p) {
        std::vector<double> x(static_cast<std::size_t>(model.input_dim()));
        double sum = 0.0;
        for (double& v : x) sum += (v = unit(rng));
        for (double& v : x) v /= sum;
        const Eigen::Vector3d eps(gauss(rng), gauss(rng), gauss(rng));

        const std::size_t flat = pick(rng);
        const std::size_t li = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) -
                                                        offsets.begin()) - 1;
        const std::size_t local = flat - offsets[li];
        const auto n_weight = static_cast<std::size_t>(layers[li]->weight.size());
        double* slot = local < n_weight ? probe_layers[li]->weight.data() + local
                                        : probe_layers[li]->bias.data() + (local - n_weight);
        const Gradients g = grad_fn(model, x, eps, beta);
        const double analytic = local < n_weight ? g[li].weight.data()[local] : g[li].bias.data()[local - n_weight];

        const double original = *slot;
        *slot = original + h;
        const double up = nelbo(probe, x, eps, beta).loss;
        *slot = original - h;
        const double down = nelbo(probe, x, eps, beta).loss;
        *slot = original;
        const double numeric = (up - down) / (2.0 * h);

        const double abs_err = std::abs(analytic - numeric);
        const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), abs_floor});
        report.max_abs_error = std::max(report.max_abs_error, abs_err);
        report.max_rel_error = std::max(report.max_rel_error, rel);
    }
    report.passed = report.max_rel_error < tolerance;
    return report;
}

namespace {

constexpr std::string_view kMagic = "VAE1";

void put_layer_values(binio::ByteWriter& w, const DenseLayer& l) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.put<float>(static_cast<float>(l.weight(r, c)));
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) w.put<float>(static_cast<float>(l.bias(r)));
}

void get_layer_values(binio::ByteReader& r, DenseLayer& l) {
    r.require(static_cast<std::uint64_t>(l.weight.size() + l.bias.size()), 4, "layer values");
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(i, c) = r.get<float>("weight");
    }
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = r.get<float>("bias");
}

}  // namespace

std::string encode_checkpoint(const VaeModel& model) {
    validate_model(model);
    const auto layers = model.layers();
    binio::ByteWriter w;
    w.magic(kMagic);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(layers.size()));
    for (const DenseLayer* l : layers) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l->weight.rows()));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(l->weight.cols()));
        w.put<std::uint8_t>(static_cast<std::uint8_t>(l->activation));
        put_layer_values(w, *l);
    }
    const bool has_adam = model.adam && !model.adam->m.empty();
    w.put<std::uint8_t>(has_adam ? 1 : 0);
    if (has_adam) {
        w.put<std::uint64_t>(model.adam->step);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            put_layer_values(w, model.adam->m[i]);
            put_layer_values(w, model.adam->v[i]);
        }
    }
    w.put<double>(model.beta);
    w.put<std::uint64_t>(model.seed);
    return w.bytes();
}

VaeModel decode_checkpoint(std::string_view bytes, const std::string& context) {
    binio::ByteReader r(bytes, context);
    r.expect_magic(kMagic);
    const auto version_at = r.offset();
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw FormatError(context + ": unsupported checkpoint version " + std::to_string(version), version_at);
    }
    const auto count_at = r.offset();
    const auto n_layers = r.get<std::uint32_t>("layer count");
    if (n_layers < 4 || n_layers > 1024) throw FormatError(context + ": implausible layer count", count_at);

    std::vector<DenseLayer> layers(n_layers);
    for (DenseLayer& l : layers) {
        const auto at = r.offset();
        const auto rows = r.get<std::uint32_t>("rows");
        const auto cols = r.get<std::uint32_t>("cols");
        const auto tag = r.get<std::uint8_t>("activation");
        if (rows == 0 || cols == 0 || rows > 65536 || cols > 65536) throw FormatError(context + ": bad layer shape", at);
        if (tag > 1) throw FormatError(context + ": unknown activation tag", at + 8);
        l.weight.resize(rows, cols);
        l.bias.resize(rows);
        l.activation = static_cast<Activation>(tag);
        get_layer_values(r, l);
    }

    // The heads are the two same-shaped 3-row layers followed by the decoder's
    // 3-column input layer.
    std::size_t head = n_layers;
    for (std::size_t i = 1; i + 2 < n_layers; ++i) {
        if (layers[i].weight.rows() == 3 && layers[i + 1].weight.rows() == 3 &&
            layers[i].weight.cols() == layers[i + 1].weight.cols() && layers[i + 2].weight.cols() == 3) {
            head = i;
            break;
        }
    }
    if (head == n_layers) throw FormatError(context + ": cannot locate latent heads", count_at);

    VaeModel model;
    model.encoder_trunk.layers.assign(layers.begin(), layers.begin() + static_cast<std::ptrdiff_t>(head));
    model.head_mean = layers[head];
    model.head_logvar = layers[head + 1];
    model.decoder.layers.assign(layers.begin() + static_cast<std::ptrdiff_t>(head + 2), layers.end());
    try {
        validate_model(model);
    } catch (const InvalidArgument& e) {
        throw FormatError(context + ": " + e.what(), count_at);
    }

    const auto flag_at = r.offset();
    const auto flag = r.get<std::uint8_t>("adam flag");
    if (flag > 1) throw FormatError(context + ": bad optimizer-state flag", flag_at);
    if (flag == 1) {
        AdamState st;
        st.step = r.get<std::uint64_t>("adam step");
        for (const DenseLayer& l : layers) {
            DenseLayer m = zeros_like(l), v = zeros_like(l);
            get_layer_values(r, m);
            get_layer_values(r, v);
            st.m.push_back(std::move(m));
            st.v.push_back(std::move(v));
        }
        model.adam = std::move(st);
    }
    model.beta = r.get<double>("beta");
    model.seed = r.get<std::uint64_t>("seed");
    r.expect_end();
    return model;
}

void checkpoint_save(const VaeModel& model, const std::filesystem::path& path) {
    binio::write_file(path, encode_checkpoint(model));
}

VaeModel checkpoint_load(const std::filesystem::path& path) {
    return decode_checkpoint(binio::read_file(path), path.string());
}

}  // namespace dropletscope::vae
