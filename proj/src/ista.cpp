#include "unfoldir/ista.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "unfoldir/common.hpp"

namespace unfoldir::ista {

void LinearProblem::validate() const {
    if (m <= 0 || n <= 0) throw ValueError("LinearProblem: empty operator");
    if (Phi.size() != static_cast<size_t>(m) * n) throw ValueError("LinearProblem: Phi size");
    if (y.size() != static_cast<size_t>(m)) throw ValueError("LinearProblem: y size");
    if (x0.size() != static_cast<size_t>(n)) throw ValueError("LinearProblem: x0 size");
    if (lam < 0) throw ValueError("LinearProblem: lam must be >= 0");
    if (rho <= 0) throw ValueError("LinearProblem: rho must be > 0");
    for (double v : Phi)
        if (!std::isfinite(v)) throw ValueError("LinearProblem: non-finite Phi");
}

double soft_threshold(double z, double t) {
    if (z > t) return z - t;
    if (z < -t) return z + t;
    return 0.0;
}

namespace {

// r = Phi x  (row-major)
void matvec(const std::vector<double>& Phi, int m, int n, const std::vector<double>& x,
            std::vector<double>& r) {
    r.assign(m, 0.0);
    for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        const double* row = Phi.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) acc += row[j] * x[j];
        r[i] = acc;
    }
}

// r = Phi^T v
void matvec_t(const std::vector<double>& Phi, int m, int n, const std::vector<double>& v,
              std::vector<double>& r) {
    r.assign(n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* row = Phi.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) r[j] += row[j] * v[i];
    }
}

}  // namespace

std::vector<std::vector<double>> ista_iterate(const LinearProblem& p, int iterations) {
    p.validate();
    std::vector<std::vector<double>> iterates;
    std::vector<double> x = p.x0, ax, resid, grad;
    double thresh = p.rho * p.lam;
    for (int k = 0; k < iterations; ++k) {
        matvec(p.Phi, p.m, p.n, x, ax);
        resid.assign(p.m, 0.0);
        for (int i = 0; i < p.m; ++i) resid[i] = ax[i] - p.y[i];
        matvec_t(p.Phi, p.m, p.n, resid, grad);
        for (int j = 0; j < p.n; ++j) x[j] = soft_threshold(x[j] - p.rho * grad[j], thresh);
        iterates.push_back(x);
    }
    return iterates;
}

double objective(const LinearProblem& p, const std::vector<double>& x) {
    if (x.size() != static_cast<size_t>(p.n)) throw ValueError("objective: x size mismatch");
    std::vector<double> ax;
    matvec(p.Phi, p.m, p.n, x, ax);
    double data = 0.0;
    for (int i = 0; i < p.m; ++i) {
        double d = ax[i] - p.y[i];
        data += d * d;
    }
    double l1 = 0.0;
    for (double v : x) l1 += std::fabs(v);
    return 0.5 * data + p.lam * l1;
}

double lipschitz_estimate(const std::vector<double>& Phi, int m, int n, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x706f776572ULL));
    std::vector<double> v(n), av, atav;
    for (double& x : v) x = rng.gaussian();
    double eig = 0.0;
    for (int it = 0; it < 100; ++it) {
        matvec(Phi, m, n, v, av);
        matvec_t(Phi, m, n, av, atav);
        double norm = 0.0;
        for (double x : atav) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-300) return 0.0;
        for (int j = 0; j < n; ++j) v[j] = atav[j] / norm;
        eig = norm;
    }
    return eig;
}

CsInstance make_cs_instance(int m, int n, int sparsity, double lam, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x6373ULL));
    CsInstance inst;
    LinearProblem& p = inst.problem;
    p.m = m;
    p.n = n;
    p.Phi.resize(static_cast<size_t>(m) * n);
    double scale = 1.0 / std::sqrt(static_cast<double>(m));
    for (double& v : p.Phi) v = rng.gaussian() * scale;

    inst.x_true.assign(n, 0.0);
    std::vector<int> idx(n);
    for (int j = 0; j < n; ++j) idx[j] = j;
    rng.shuffle(idx);
    for (int s = 0; s < sparsity; ++s) {
        double sign = rng.next_below(2) == 0 ? 1.0 : -1.0;
        inst.x_true[idx[s]] = sign * rng.uniform(0.5, 1.5);
    }
    matvec(p.Phi, m, n, inst.x_true, p.y);
    p.lam = lam;
    p.rho = 1.0 / std::max(lipschitz_estimate(p.Phi, m, n, seed), 1e-12);
    p.x0.assign(n, 0.0);
    return inst;
}

std::string trace_to_text(const std::vector<std::vector<double>>& iterates) {
    std::ostringstream os;
    for (size_t k = 0; k < iterates.size(); ++k) {
        os << "k=" << (k + 1);
        for (double v : iterates[k]) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), " %.12g", v);
            os << buf;
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace unfoldir::ista
