#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Reference proximal-gradient / ISTA solver on explicit dense operators.
// Ground truth for the unfolding skeleton; intentionally shares no code
// with the learned-network substrate.
namespace unfoldir::ista {

struct LinearProblem {
    int m = 0;                // rows of Phi
    int n = 0;                // cols of Phi
    std::vector<double> Phi;  // row-major m x n
    std::vector<double> y;    // m
    double lam = 0.0;         // l1 weight, >= 0
    double rho = 1.0;         // step size, > 0
    std::vector<double> x0;   // n

    void validate() const;
};

double soft_threshold(double z, double t);

// x_k = soft_threshold(x_{k-1} - rho*Phi^T(Phi x_{k-1} - y), rho*lam), k=1..K
std::vector<std::vector<double>> ista_iterate(const LinearProblem& p, int iterations);

// 0.5*||Phi x - y||^2 + lam*||x||_1
double objective(const LinearProblem& p, const std::vector<double>& x);

// Largest eigenvalue of Phi^T Phi by power iteration (100 steps).
double lipschitz_estimate(const std::vector<double>& Phi, int m, int n, uint64_t seed = 1);

// Random compressive-sensing instance: Gaussian Phi (entries N(0,1/sqrt(m))),
// sparse ground truth with `sparsity` nonzeros, y = Phi x_true.
struct CsInstance {
    LinearProblem problem;
    std::vector<double> x_true;
};
CsInstance make_cs_instance(int m, int n, int sparsity, double lam, uint64_t seed);

std::string trace_to_text(const std::vector<std::vector<double>>& iterates);

}  // namespace unfoldir::ista
