// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>

#include "lopt/cli.hpp"

namespace lopt::cli {

namespace {

using Objective = std::function<double(const std::vector<ParamTensor>&, std::vector<ParamTensor>&)>;

struct Problem {
    std::vector<std::string> names;
    std::vector<ParamTensor> params;
    Objective objective; // returns loss, fills gradients
};

Problem quadratic(std::mt19937_64& rng) {
    std::normal_distribution<float> normal;
    ParamTensor theta(16, 16);
    for (float& x : theta.data()) x = normal(rng);
    Problem p;
    p.names = {"theta"};
    p.params = {theta};
    p.objective = [](const std::vector<ParamTensor>& params, std::vector<ParamTensor>& grads) {
        grads = params;
        return 0.5 * params[0].matrix().cast<double>().squaredNorm();
    };
    return p;
}

// Two interleaved half circles with Gaussian noise, classified by a
// 2 -> 16 (tanh) -> 1 (logistic) network under mean binary cross-entropy.
Problem two_moons(std::mt19937_64& rng) {
    constexpr int kPoints = 200;
    constexpr int kHidden = 16;
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::normal_distribution<double> noise(0.0, 0.1);
    auto x = std::make_shared<Eigen::MatrixXd>(2, kPoints);
    auto y = std::make_shared<Eigen::RowVectorXd>(kPoints);
    for (int i = 0; i < kPoints; ++i) {
        const double t = angle(rng);
        const bool upper = i % 2 == 0;
        (*x)(0, i) = (upper ? std::cos(t) : 1.0 - std::cos(t)) + noise(rng);
        (*x)(1, i) = (upper ? std::sin(t) : 0.5 - std::sin(t)) + noise(rng);
        (*y)(i) = upper ? 0.0 : 1.0;
    }
    std::normal_distribution<float> normal;
    ParamTensor w1(kHidden, 2), b1(kHidden, 1), w2(1, kHidden), b2(1, 1);
    for (float& v : w1.data()) v = normal(rng) / std::sqrt(2.0f);
    for (float& v : w2.data()) v = normal(rng) / std::sqrt(float(kHidden));

    Problem p;
    p.names = {"w1", "b1", "w2", "b2"};
    p.params = {w1, b1, w2, b2};
    p.objective = [x, y](const std::vector<ParamTensor>& params, std::vector<ParamTensor>& grads) {
        const Eigen::MatrixXd W1 = params[0].matrix().cast<double>();
        const Eigen::VectorXd B1 = params[1].matrix().cast<double>();
        const Eigen::MatrixXd W2 = params[2].matrix().cast<double>();
        const double B2 = params[3](0, 0);
        const double n = double(x->cols());

        const Eigen::MatrixXd h = ((W1 * *x).colwise() + B1).array().tanh().matrix();
        const Eigen::RowVectorXd logit = (W2 * h).array() + B2;
        double loss = 0.0;
        Eigen::RowVectorXd dlogit(logit.size());
        for (Eigen::Index i = 0; i < logit.size(); ++i) {
            const double z = logit(i);
            const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
            loss += softplus - (*y)(i) * z;
            dlogit(i) = (1.0 / (1.0 + std::exp(-z)) - (*y)(i)) / n;
        }
        const Eigen::MatrixXd dpre = ((W2.transpose() * dlogit).array() * (1.0 - h.array().square())).matrix();
        grads.resize(4);
        grads[0] = ParamTensor(MatrixXf((dpre * x->transpose()).cast<float>()));
        grads[1] = ParamTensor(MatrixXf(dpre.rowwise().sum().cast<float>()));
        grads[2] = ParamTensor(MatrixXf((dlogit * h.transpose()).cast<float>()));
        grads[3] = ParamTensor(1, 1, float(dlogit.sum()));
        return loss / n;
    };
    return p;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(9);
    os << v;
    return os.str();
}

} // namespace

Task parse_task(const std::string& s) {
    if (s == "quadratic") return Task::Quadratic;
    if (s == "two_moons_mlp") return Task::TwoMoonsMlp;
    throw Error(ErrorCode::InvalidArgument, "unknown task '" + s + "'");
}

std::string to_string(Task t) { return t == Task::Quadratic ? "quadratic" : "two_moons_mlp"; }

TrainResult run_train(const TrainConfig& cfg) {
    require(cfg.steps >= 1, ErrorCode::InvalidArgument, "steps must be at least 1");
    const bool lopt = cfg.optimizer == "lopt";
    require(lopt || cfg.optimizer == "adam" || cfg.optimizer == "adafactor", ErrorCode::InvalidArgument,
            "unknown optimizer '" + cfg.optimizer + "'");
    const double lr = cfg.lr.value_or(lopt ? 1.0 : 0.1);

    std::mt19937_64 rng(cfg.seed);
    Problem problem = cfg.task == Task::Quadratic ? quadratic(rng) : two_moons(rng);
    const std::size_t count = problem.params.size();

    OptimizerHandle handle;
    std::vector<ParamTensor> m, v;
    if (lopt) {
        handle = OptimizerHandle(problem.names, problem.params,
                                 resolve_weights(cfg.weights_path, "small_fc_lopt", cfg.seed));
        handle.path = cfg.path;
        handle.engine.workers = cfg.workers;
        handle.schedule = ScheduleConfig::constant(lr);
    } else {
        for (const auto& p : problem.params) {
            m.emplace_back(p.rows(), cfg.optimizer == "adam" ? p.cols() : 1);
            v.emplace_back(cfg.optimizer == "adam" ? p.rows() : 1, p.cols());
        }
    }
    auto& params = lopt ? handle.params : problem.params;

    TrainResult result;
    result.metrics.header = {"schema", "task", "optimizer", "step", "loss"};
    const std::string label = lopt ? "lopt_" + to_string(cfg.path) : cfg.optimizer;
    std::vector<ParamTensor> grads;
    for (std::size_t step = 0; step <= cfg.steps; ++step) {
        const double loss = problem.objective(params, grads);
        result.losses.push_back(loss);
        result.metrics.rows.push_back({kTrainSchema, to_string(cfg.task), label, std::to_string(step), fmt(loss)});
        if (!std::isfinite(loss)) {
            result.diverged = true;
            break;
        }
        if (step == cfg.steps) break;
        try {
            if (lopt) {
                opt_step(handle, grads, float(loss));
            } else {
                for (std::size_t i = 0; i < count; ++i) {
                    if (cfg.optimizer == "adam")
                        adam_step_inplace(params[i], grads[i], m[i], v[i], 0.9f, 0.999f, float(lr), 1e-8f, step + 1);
                    else
                        adafactor_step_inplace(params[i], grads[i], m[i], v[i], 0.999f, float(lr));
                }
            }
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NonFinite) throw;
            result.diverged = true;
            break;
        }
    }
    return result;
}

} // namespace lopt::cli
