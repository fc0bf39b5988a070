#pragma once

// Multinomial logistic regression over embeddings. The objective follows the
// reference convention: 0.5*||W||^2 + C * sum_i cross_entropy(softmax(W v_i + b), y_i)
// with the intercept fitted but unregularized. Training starts from zero
// parameters and runs a deterministic L-BFGS with Armijo backtracking, so
// identical inputs yield bit-identical classifiers.

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "memprobe/core.hpp"

namespace memprobe {

struct TrainConfig {
    double regularization_c = 0.316;
    int max_iterations = 5000;
    double grad_tolerance = 1e-5;   // on the max-abs gradient component
    RngSeed seed = {};
};

struct LinearClassifier {
    std::vector<int> class_labels;   // distinct training labels, ascending
    std::vector<double> weights;     // |classes| x dim, row-major
    std::vector<double> bias;        // |classes|
    int dim = 0;
    std::int64_t trained_on_count = 0;

    int num_classes() const { return static_cast<int>(class_labels.size()); }

    /// Softmax over the classifier's own label set. A single-class
    /// classifier is a constant predictor.
    ProbabilityDistribution predict_proba(const EmbeddingVector& q) const {
        if (q.dim() != dim)
            throw DimensionMismatchError("classifier dim " + std::to_string(dim) +
                                         ", query dim " + std::to_string(q.dim()));
        ProbabilityDistribution out;
        out.support = class_labels;
        if (num_classes() == 1) {
            out.probs = {1.0};
            return out;
        }
        std::vector<double> logits(class_labels.size());
        for (std::size_t c = 0; c < class_labels.size(); ++c) {
            const double* w = weights.data() + c * static_cast<std::size_t>(dim);
            double acc = bias[c];
            for (int j = 0; j < dim; ++j)
                acc += w[j] * static_cast<double>(q.values[j]);
            logits[c] = acc;
        }
        out.probs = softmax(logits);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Optimizer

namespace opt {

/// Objective callback: returns f(x) and, when `grad` is non-null, writes the
/// gradient into it.
using Objective = std::function<double(const std::vector<double>&, std::vector<double>*)>;

struct Options {
    int max_iterations = 5000;
    double grad_tolerance = 1e-5;
    int history = 10;
};

struct Result {
    std::vector<double> x;
    double objective = 0.0;
    std::vector<double> objective_trace;   // value after each accepted step
    int iterations = 0;
    bool converged = false;
};

inline double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

/// Limited-memory BFGS with Armijo backtracking. Only strictly decreasing
/// steps are accepted; curvature pairs with non-positive y's are skipped.
inline Result lbfgs_minimize(const Objective& fn, std::vector<double> x0,
                             const Options& opts) {
    const std::size_t n = x0.size();
    Result res;
    res.x = std::move(x0);

    std::vector<double> grad(n);
    double f = fn(res.x, &grad);
    if (!std::isfinite(f) || !std::isfinite(max_abs(grad)))
        throw NonFiniteError("lbfgs: non-finite objective at start");
    res.objective = f;
    res.objective_trace.push_back(f);

    std::vector<std::vector<double>> s_hist, y_hist;
    std::vector<double> rho_hist;

    std::vector<double> direction(n), x_new(n), grad_new(n);

    for (int iter = 0; iter < opts.max_iterations; ++iter) {
        if (max_abs(grad) < opts.grad_tolerance) {
            res.converged = true;
            break;
        }

        // Two-loop recursion for d = -H * g.
        direction = grad;
        std::vector<double> alpha(s_hist.size());
        for (std::size_t i = s_hist.size(); i-- > 0;) {
            alpha[i] = rho_hist[i] * dot(s_hist[i], direction);
            for (std::size_t j = 0; j < n; ++j) direction[j] -= alpha[i] * y_hist[i][j];
        }
        if (!s_hist.empty()) {
            const auto& s = s_hist.back();
            const auto& y = y_hist.back();
            double gamma = dot(s, y) / dot(y, y);
            for (double& d : direction) d *= gamma;
        }
        for (std::size_t i = 0; i < s_hist.size(); ++i) {
            double beta = rho_hist[i] * dot(y_hist[i], direction);
            for (std::size_t j = 0; j < n; ++j)
                direction[j] += s_hist[i][j] * (alpha[i] - beta);
        }
        for (double& d : direction) d = -d;

        double dg = dot(direction, grad);
        if (dg >= 0.0) {   // not a descent direction: fall back to -g
            for (std::size_t j = 0; j < n; ++j) direction[j] = -grad[j];
            dg = -dot(grad, grad);
        }

        double step = s_hist.empty() ? 1.0 / std::max(1.0, max_abs(grad)) : 1.0;
        const double c1 = 1e-4;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            for (std::size_t j = 0; j < n; ++j) x_new[j] = res.x[j] + step * direction[j];
            double f_new = fn(x_new, nullptr);
            if (std::isfinite(f_new) && f_new <= f + c1 * step * dg && f_new < f) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;   // no further decrease representable

        f = fn(x_new, &grad_new);
        if (!std::isfinite(f) || !std::isfinite(max_abs(grad_new)))
            throw NonFiniteError("lbfgs: objective diverged");

        std::vector<double> s(n), y(n);
        for (std::size_t j = 0; j < n; ++j) {
            s[j] = x_new[j] - res.x[j];
            y[j] = grad_new[j] - grad[j];
        }
        double ys = dot(y, s);
        if (ys > 1e-10 * l2_norm(std::span<const double>(y)) *
                     l2_norm(std::span<const double>(s))) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            rho_hist.push_back(1.0 / ys);
            if (static_cast<int>(s_hist.size()) > opts.history) {
                s_hist.erase(s_hist.begin());
                y_hist.erase(y_hist.begin());
                rho_hist.erase(rho_hist.begin());
            }
        }

        res.x.swap(x_new);
        grad.swap(grad_new);
        res.objective = f;
        res.objective_trace.push_back(f);
        res.iterations = iter + 1;
    }
    if (max_abs(grad) < opts.grad_tolerance) res.converged = true;
    return res;
}

}  // namespace opt

// ---------------------------------------------------------------------------
// Logistic objective

namespace detail {

/// Dense training view: n rows of dim floats plus class indices 0..K-1.
struct LogisticProblem {
    std::vector<float> x;     // n x dim, row-major
    std::vector<int> y;       // class index per row
    int n = 0;
    int dim = 0;
    int num_classes = 0;
    double c = 0.316;

    // Parameter layout: [W (K x dim, row-major) | b (K)].
    std::size_t param_count() const {
        return static_cast<std::size_t>(num_classes) * dim + num_classes;
    }

    double eval(const std::vector<double>& theta, std::vector<double>* grad) const {
        const int K = num_classes;
        const double* w = theta.data();
        const double* b = theta.data() + static_cast<std::size_t>(K) * dim;
        if (grad) std::fill(grad->begin(), grad->end(), 0.0);

        double loss = 0.0;
        std::vector<double> logits(K), probs(K);
        for (int i = 0; i < n; ++i) {
            const float* xi = x.data() + static_cast<std::size_t>(i) * dim;
            for (int k = 0; k < K; ++k) {
                const double* wk = w + static_cast<std::size_t>(k) * dim;
                double acc = b[k];
                for (int j = 0; j < dim; ++j)
                    acc += wk[j] * static_cast<double>(xi[j]);
                logits[k] = acc;
            }
            double m = logits[0];
            for (int k = 1; k < K; ++k) m = std::max(m, logits[k]);
            double z = 0.0;
            for (int k = 0; k < K; ++k) {
                probs[k] = std::exp(logits[k] - m);
                z += probs[k];
            }
            loss -= c * (logits[y[i]] - m - std::log(z));
            if (grad) {
                double* gw = grad->data();
                double* gb = grad->data() + static_cast<std::size_t>(K) * dim;
                for (int k = 0; k < K; ++k) {
                    double coeff = c * (probs[k] / z - (k == y[i] ? 1.0 : 0.0));
                    double* gwk = gw + static_cast<std::size_t>(k) * dim;
                    for (int j = 0; j < dim; ++j)
                        gwk[j] += coeff * static_cast<double>(xi[j]);
                    gb[k] += coeff;
                }
            }
        }
        // Ridge term on weights only.
        double reg = 0.0;
        const std::size_t wlen = static_cast<std::size_t>(K) * dim;
        for (std::size_t j = 0; j < wlen; ++j) reg += w[j] * w[j];
        loss += 0.5 * reg;
        if (grad)
            for (std::size_t j = 0; j < wlen; ++j) (*grad)[j] += w[j];
        return loss;
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Training

using TrainSample = std::pair<EmbeddingVector, int>;

/// Fits a multinomial logistic classifier on the samples. Deterministic:
/// same samples and config give a bit-identical classifier. A single-class
/// sample set yields a constant predictor.
inline LinearClassifier train_linear(const std::vector<TrainSample>& samples,
                                     const TrainConfig& cfg) {
    if (samples.empty()) throw Error("train_linear: no samples");
    if (cfg.regularization_c <= 0.0 || cfg.max_iterations < 1)
        throw InvalidConfigError("train_linear: bad config");

    const int dim = samples.front().first.dim();
    std::vector<int> labels;
    for (const auto& [emb, label] : samples) {
        if (emb.dim() != dim)
            throw DimensionMismatchError("train_linear: mixed dims");
        labels.push_back(label);
    }
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());

    LinearClassifier clf;
    clf.class_labels = labels;
    clf.dim = dim;
    clf.trained_on_count = static_cast<std::int64_t>(samples.size());

    const int K = static_cast<int>(labels.size());
    if (K == 1) {   // constant predictor; theta = 0 is already optimal
        clf.weights.assign(static_cast<std::size_t>(dim), 0.0);
        clf.bias.assign(1, 0.0);
        return clf;
    }

    detail::LogisticProblem prob;
    prob.n = static_cast<int>(samples.size());
    prob.dim = dim;
    prob.num_classes = K;
    prob.c = cfg.regularization_c;
    prob.x.resize(static_cast<std::size_t>(prob.n) * dim);
    prob.y.resize(prob.n);
    for (int i = 0; i < prob.n; ++i) {
        const auto& [emb, label] = samples[static_cast<std::size_t>(i)];
        std::copy(emb.values.begin(), emb.values.end(),
                  prob.x.begin() + static_cast<std::size_t>(i) * dim);
        prob.y[i] = static_cast<int>(
            std::lower_bound(labels.begin(), labels.end(), label) - labels.begin());
    }

    opt::Options opts;
    opts.max_iterations = cfg.max_iterations;
    opts.grad_tolerance = cfg.grad_tolerance;
    auto result = opt::lbfgs_minimize(
        [&prob](const std::vector<double>& theta, std::vector<double>* grad) {
            return prob.eval(theta, grad);
        },
        std::vector<double>(prob.param_count(), 0.0), opts);

    clf.weights.assign(result.x.begin(),
                       result.x.begin() + static_cast<std::size_t>(K) * dim);
    clf.bias.assign(result.x.begin() + static_cast<std::size_t>(K) * dim, result.x.end());
    return clf;
}

}  // namespace memprobe
