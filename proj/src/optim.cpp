// SPDX-License-Identifier: Apache-2.0
#include "lopt/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include <nlohmann/json.hpp>

namespace lopt {

namespace {

std::string format_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

const std::string& meta_value(const NamedTensorFile& file, const std::string& key) {
    auto it = file.metadata.find(key);
    if (it == file.metadata.end()) throw Error(ErrorCode::SchemaMismatch, "checkpoint lacks metadata '" + key + "'");
    return it->second;
}

double meta_double(const NamedTensorFile& file, const std::string& key) {
    try {
        return std::stod(meta_value(file, key));
    } catch (const std::logic_error&) {
        throw Error(ErrorCode::SchemaMismatch, "checkpoint metadata '" + key + "' is not a number");
    }
}

std::uint64_t meta_u64(const NamedTensorFile& file, const std::string& key) {
    try {
        return std::stoull(meta_value(file, key));
    } catch (const std::logic_error&) {
        throw Error(ErrorCode::SchemaMismatch, "checkpoint metadata '" + key + "' is not an integer");
    }
}

} // namespace

// ---- schedule ---------------------------------------------------------------

std::string to_string(ScheduleKind k) { return k == ScheduleKind::Constant ? "constant" : "cosine"; }

ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "constant") return ScheduleKind::Constant;
    if (s == "cosine") return ScheduleKind::Cosine;
    throw Error(ErrorCode::InvalidArgument, "unknown schedule '" + s + "'");
}

void ScheduleConfig::validate() const {
    require(std::isfinite(max_lr) && std::isfinite(min_lr), ErrorCode::NonFinite, "schedule learning rates");
    require(min_lr >= 0.0 && min_lr <= max_lr, ErrorCode::InvalidArgument, "schedule needs 0 <= min_lr <= max_lr");
    if (kind == ScheduleKind::Cosine)
        require(warmup_steps <= total_steps, ErrorCode::InvalidArgument, "schedule needs warmup_steps <= total_steps");
}

double schedule_lr(const ScheduleConfig& cfg, std::uint64_t step) {
    cfg.validate();
    if (step < cfg.warmup_steps) return cfg.max_lr * (double(step) / double(cfg.warmup_steps));
    if (cfg.kind == ScheduleKind::Constant) return cfg.max_lr;
    if (step >= cfg.total_steps) return cfg.min_lr;
    if (step == cfg.warmup_steps) return cfg.max_lr;
    const double progress = double(step - cfg.warmup_steps) / double(cfg.total_steps - cfg.warmup_steps);
    const double lr = cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
    return std::clamp(lr, cfg.min_lr, cfg.max_lr);
}

// ---- weight decay -----------------------------------------------------------

void apply_weight_decay(ParamTensor& theta, double lr, double lambda) {
    require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::InvalidArgument, "weight decay must be >= 0");
    require(std::isfinite(lr), ErrorCode::NonFinite, "weight decay learning rate");
    if (lambda == 0.0) return;
    const float keep = static_cast<float>(1.0 - lr * lambda);
    theta.matrix() *= keep;
}

ParamTensor apply_weight_decay(const ParamTensor& theta, double lr, double lambda) {
    ParamTensor out = theta;
    apply_weight_decay(out, lr, lambda);
    return out;
}

// ---- handle -----------------------------------------------------------------

OptimizerHandle::OptimizerHandle(std::vector<std::string> n, std::vector<ParamTensor> p, LoptWeights w)
    : names(std::move(n)), params(std::move(p)), weights(std::move(w)) {
    require(names.size() == params.size(), ErrorCode::ShapeMismatch, "one name per parameter");
    for (const auto& t : params) states.push_back(OptState::zeros(t.shape()));
    validate();
}

const LoptWeights& OptimizerHandle::weights_for(std::size_t i) const {
    auto it = per_tensor_weights.find(names.at(i));
    return it == per_tensor_weights.end() ? weights : it->second;
}

std::size_t OptimizerHandle::find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return i;
    throw Error(ErrorCode::InvalidArgument, "no parameter named '" + name + "'");
}

void OptimizerHandle::validate() const {
    require(names.size() == params.size() && params.size() == states.size(), ErrorCode::ShapeMismatch,
            "names, params and states must line up");
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j)
            require(names[i] != names[j], ErrorCode::DuplicateName, "parameter '" + names[i] + "' listed twice");
        require_same_shape(states[i].shape(), params[i].shape(), "state of '" + names[i] + "'");
        require(states[i].step == step, ErrorCode::SchemaMismatch, "state of '" + names[i] + "' is out of step");
    }
    for (const auto& [name, w] : per_tensor_weights) {
        find(name);
        require(w.feature_set == weights.feature_set, ErrorCode::FeatureSetMismatch,
                "per-tensor weights for '" + name + "' use feature set '" + w.feature_set + "'");
    }
    schedule.validate();
    require(weight_decay >= 0.0, ErrorCode::InvalidArgument, "weight decay must be >= 0");
}

UpdateReport step_tensor(ParamTensor& param, OptState& state, const ParamTensor& grad, const LoptWeights& weights,
                         const FeatureSetSpec& spec, ExecutionPath path, const EngineConfig& engine, double lr,
                         double weight_decay, ScratchTracker& tracker) {
    state_step_inplace(state, grad, weights.betas);
    const ElementBlock block = make_block(param, grad, state);
    UpdateReport report =
        engine_step(path, block, param.data(), weights, spec, engine, tracker, static_cast<float>(lr));
    apply_weight_decay(param, lr, weight_decay);
    require(param.all_finite(), ErrorCode::NonFinite, "parameter after step");
    return report;
}

void opt_step(OptimizerHandle& h, const std::vector<ParamTensor>& grads, std::optional<float> loss) {
    h.validate();
    require(grads.size() == h.params.size(), ErrorCode::ShapeMismatch,
            "expected " + std::to_string(h.params.size()) + " gradients, got " + std::to_string(grads.size()));
    for (std::size_t i = 0; i < grads.size(); ++i) {
        require_same_shape(grads[i].shape(), h.params[i].shape(), "gradient of '" + h.names[i] + "'");
        require_finite(grads[i].data(), "gradient of '" + h.names[i] + "'");
    }
    const FeatureSetSpec spec = FeatureSetSpec::from_name(h.weights.feature_set);
    const double lr = schedule_lr(h.schedule, h.step + 1);
    ScratchTracker tracker(h.engine.scratch_cap_bytes);

    h.last_reports.clear();
    for (std::size_t i = 0; i < grads.size(); ++i) {
        UpdateReport report = step_tensor(h.params[i], h.states[i], grads[i], h.weights_for(i), spec, h.path,
                                          h.engine, lr, h.weight_decay, tracker);
        report.tensor = h.names[i];
        h.last_reports.push_back(std::move(report));
    }
    ++h.step;
    h.last_loss = loss;
}

// ---- baselines --------------------------------------------------------------

void adam_step_inplace(ParamTensor& theta, const ParamTensor& g, ParamTensor& m, ParamTensor& v, float beta1,
                       float beta2, float lr, float eps, std::uint64_t t) {
    require(t >= 1, ErrorCode::InvalidArgument, "adam step counter starts at 1");
    require_same_shape(g.shape(), theta.shape(), "adam gradient");
    require_same_shape(m.shape(), theta.shape(), "adam first moment");
    require_same_shape(v.shape(), theta.shape(), "adam second moment");
    require_finite(g.data(), "adam gradient");
    auto ga = g.matrix().array();
    m.matrix().array() = beta1 * m.matrix().array() + (1.0f - beta1) * ga;
    v.matrix().array() = beta2 * v.matrix().array() + (1.0f - beta2) * ga.square();
    const float bc1 = static_cast<float>(1.0 - std::pow(double(beta1), double(t)));
    const float bc2 = static_cast<float>(1.0 - std::pow(double(beta2), double(t)));
    theta.matrix().array() -= lr * (m.matrix().array() / bc1) / ((v.matrix().array() / bc2).sqrt() + eps);
}

AdamResult adam_step(const ParamTensor& theta, const ParamTensor& g, const ParamTensor& m, const ParamTensor& v,
                     float beta1, float beta2, float lr, float eps, std::uint64_t t) {
    AdamResult r{theta, m, v};
    adam_step_inplace(r.theta, g, r.m, r.v, beta1, beta2, lr, eps, t);
    return r;
}

ParamTensor adafactor_second_moment(const ParamTensor& r, const ParamTensor& c) {
    require(r.cols() == 1 && c.rows() == 1, ErrorCode::ShapeMismatch, "adafactor factors must be m x 1 and 1 x n");
    const float mean_r = static_cast<float>(r.matrix().cast<double>().mean());
    MatrixXf v = (r.matrix() * c.matrix()) / mean_r;
    return ParamTensor(std::move(v));
}

void adafactor_step_inplace(ParamTensor& theta, const ParamTensor& g, ParamTensor& r, ParamTensor& c, float beta2,
                            float lr, float eps1) {
    require_same_shape(g.shape(), theta.shape(), "adafactor gradient");
    require_same_shape(r.shape(), {theta.rows(), 1}, "adafactor row factor");
    require_same_shape(c.shape(), {1, theta.cols()}, "adafactor column factor");
    require_finite(g.data(), "adafactor gradient");
    const Eigen::ArrayXXd sq = (g.matrix().array().square() + eps1).cast<double>();
    const Eigen::ArrayXd row_mean = sq.rowwise().mean();
    const Eigen::ArrayXd col_mean = sq.colwise().mean().transpose();
    r.matrix().array() = beta2 * r.matrix().array() + (1.0f - beta2) * row_mean.cast<float>();
    c.matrix().array() = beta2 * c.matrix().array() + (1.0f - beta2) * col_mean.transpose().cast<float>();
    const ParamTensor v = adafactor_second_moment(r, c);
    theta.matrix().array() -= lr * g.matrix().array() / v.matrix().array().sqrt();
}

AdafactorResult adafactor_step(const ParamTensor& theta, const ParamTensor& g, const ParamTensor& r,
                               const ParamTensor& c, float beta2, float lr, float eps1) {
    AdafactorResult out{theta, r, c};
    adafactor_step_inplace(out.theta, g, out.r, out.c, beta2, lr, eps1);
    return out;
}

// ---- checkpoints ------------------------------------------------------------

NamedTensorFile checkpoint_save(const OptimizerHandle& h) {
    h.validate();
    NamedTensorFile file;
    h.weights.save_into(file, "lopt/");
    for (const auto& [name, w] : h.per_tensor_weights) w.save_into(file, "lopt_tensor/" + name + "/");
    file.feature_set = h.weights.feature_set;
    file.metadata["kind"] = "checkpoint";
    file.metadata["step"] = std::to_string(h.step);
    file.metadata["feature_set"] = h.weights.feature_set;
    file.metadata["schedule"] = to_string(h.schedule.kind);
    file.metadata["max_lr"] = format_double(h.schedule.max_lr);
    file.metadata["min_lr"] = format_double(h.schedule.min_lr);
    file.metadata["warmup_steps"] = std::to_string(h.schedule.warmup_steps);
    file.metadata["total_steps"] = std::to_string(h.schedule.total_steps);
    file.metadata["weight_decay"] = format_double(h.weight_decay);
    file.metadata["path"] = to_string(h.path);
    file.metadata["params"] = nlohmann::json(h.names).dump();
    std::vector<std::string> overrides;
    for (const auto& [name, w] : h.per_tensor_weights) overrides.push_back(name);
    file.metadata["per_tensor_weights"] = nlohmann::json(overrides).dump();
    for (std::size_t i = 0; i < h.params.size(); ++i) {
        file.add("param/" + h.names[i], TensorEntry::from_tensor(h.params[i]));
        save_state(file, h.names[i], h.states[i]);
    }
    return file;
}

OptimizerHandle checkpoint_load(const NamedTensorFile& file, const std::optional<std::string>& expected_feature_set) {
    auto kind = file.metadata.find("kind");
    require(kind != file.metadata.end() && kind->second == "checkpoint", ErrorCode::SchemaMismatch,
            "file is not a checkpoint");
    const std::string& fs = meta_value(file, "feature_set");
    if (expected_feature_set && *expected_feature_set != fs)
        throw Error(ErrorCode::FeatureSetMismatch,
                    "checkpoint feature set '" + fs + "', expected '" + *expected_feature_set + "'");
    require(file.feature_set.empty() || file.feature_set == fs, ErrorCode::FeatureSetMismatch,
            "checkpoint header and metadata disagree on the feature set");

    OptimizerHandle h;
    h.weights = LoptWeights::load_from(file, "lopt/");
    require(h.weights.feature_set == fs, ErrorCode::FeatureSetMismatch, "optimizer weights feature set");
    require(h.weights.input_dim() == FeatureSetSpec::from_name(fs).d_feat, ErrorCode::FeatureSetMismatch,
            "optimizer MLP input width does not match feature set '" + fs + "'");

    std::vector<std::string> names, overrides;
    try {
        names = nlohmann::json::parse(meta_value(file, "params")).get<std::vector<std::string>>();
        overrides = nlohmann::json::parse(meta_value(file, "per_tensor_weights")).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::SchemaMismatch, std::string("checkpoint name lists: ") + e.what());
    }
    h.step = meta_u64(file, "step");
    h.schedule.kind = parse_schedule_kind(meta_value(file, "schedule"));
    h.schedule.max_lr = meta_double(file, "max_lr");
    h.schedule.min_lr = meta_double(file, "min_lr");
    h.schedule.warmup_steps = meta_u64(file, "warmup_steps");
    h.schedule.total_steps = meta_u64(file, "total_steps");
    h.weight_decay = meta_double(file, "weight_decay");
    h.path = parse_path(meta_value(file, "path"));
    for (const auto& name : names) {
        h.names.push_back(name);
        h.params.push_back(file.at("param/" + name).to_tensor());
        h.states.push_back(load_state(file, name));
    }
    for (const auto& name : overrides) h.per_tensor_weights[name] = LoptWeights::load_from(file, "lopt_tensor/" + name + "/");
    h.validate();
    return h;
}

} // namespace lopt
