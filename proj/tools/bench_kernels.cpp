// Benchmarks every compute kernel's serial reference against the OpenMP
// variant and checks that their outputs stay bit-identical. Run with
// OMP_NUM_THREADS set to taste; each kernel reports the median wall time of
// several repetitions and the speedup.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "neti/kernels.hpp"
#include "neti/rng.hpp"

namespace {

using clk = std::chrono::steady_clock;

double time_once(const std::function<void()>& fn) {
  const auto t0 = clk::now();
  fn();
  const auto t1 = clk::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

double median_time(const std::function<void()>& fn, int reps) {
  std::vector<double> ms;
  fn();  // warm up
  for (int i = 0; i < reps; ++i) {
    ms.push_back(time_once(fn));
  }
  std::sort(ms.begin(), ms.end());
  return ms[ms.size() / 2];
}

std::vector<float> random_vec(size_t n, neti::Rng& rng) {
  std::vector<float> v(n);
  for (float& x : v) {
    x = static_cast<float>(rng.normal());
  }
  return v;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

struct Case {
  std::string name;
  std::function<void()> serial;
  std::function<void()> parallel;
  std::function<bool()> equal;
};

int run(const std::vector<Case>& cases, int reps) {
  std::printf("%-22s %12s %12s %9s  %s\n", "kernel", "serial (ms)",
              "openmp (ms)", "speedup", "bitwise");
  bool all_equal = true;
  for (const Case& c : cases) {
    const double ts = median_time(c.serial, reps);
    const double tp = median_time(c.parallel, reps);
    const bool eq = c.equal();
    all_equal = all_equal && eq;
    std::printf("%-22s %12.3f %12.3f %8.2fx  %s\n", c.name.c_str(), ts, tp,
                ts / tp, eq ? "ok" : "MISMATCH");
  }
  return all_equal ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  int reps = 7;
  if (argc > 1) {
    reps = std::max(1, std::atoi(argv[1]));
  }
#ifdef _OPENMP
  std::printf("OpenMP enabled, max threads %d\n", omp_get_max_threads());
#else
  std::printf("built without OpenMP; both columns run serial code\n");
#endif

  neti::Rng rng(1234);
  namespace ks = neti::kernels::serial;
  namespace kp = neti::kernels::par;

  // matmul and its gradients
  const int m = 384, k = 384, n = 384;
  const std::vector<float> A = random_vec(static_cast<size_t>(m) * k, rng);
  const std::vector<float> B = random_vec(static_cast<size_t>(k) * n, rng);
  const std::vector<float> dC = random_vec(static_cast<size_t>(m) * n, rng);
  std::vector<float> mm_s(static_cast<size_t>(m) * n), mm_p(mm_s);
  std::vector<float> da_s(static_cast<size_t>(m) * k), da_p(da_s);
  std::vector<float> db_s(static_cast<size_t>(k) * n), db_p(db_s);

  // 3x3 convolution on a latent-sized grid, scaled up
  const int H = 64, W = 64, cin = 32, cout = 32;
  const std::vector<float> X =
      random_vec(static_cast<size_t>(H) * W * cin, rng);
  const std::vector<float> Wt =
      random_vec(static_cast<size_t>(9) * cin * cout, rng);
  const std::vector<float> dY =
      random_vec(static_cast<size_t>(H) * W * cout, rng);
  std::vector<float> cv_s(static_cast<size_t>(H) * W * cout), cv_p(cv_s);
  std::vector<float> cx_s(static_cast<size_t>(H) * W * cin), cx_p(cx_s);
  std::vector<float> cw_s(static_cast<size_t>(9) * cin * cout), cw_p(cw_s);

  // row-wise ops
  const int rm = 2048, rn = 512;
  const std::vector<float> R = random_vec(static_cast<size_t>(rm) * rn, rng);
  const std::vector<float> dR = random_vec(static_cast<size_t>(rm) * rn, rng);
  std::vector<float> ln_s(R.size()), ln_p(R.size());
  std::vector<float> lng_s(R.size()), lng_p(R.size());
  std::vector<float> mu_s(rm), is_s(rm), mu_p(rm), is_p(rm);
  std::vector<float> sm_s(R.size()), sm_p(R.size());
  std::vector<float> lr_s(R.size()), lr_p(R.size());

  const std::vector<Case> cases = {
      {"matmul",
       [&] { ks::matmul(A.data(), B.data(), mm_s.data(), m, k, n); },
       [&] { kp::matmul(A.data(), B.data(), mm_p.data(), m, k, n); },
       [&] { return bitwise_equal(mm_s, mm_p); }},
      {"matmul_grad_a",
       [&] { ks::matmul_grad_a(dC.data(), B.data(), da_s.data(), m, k, n); },
       [&] { kp::matmul_grad_a(dC.data(), B.data(), da_p.data(), m, k, n); },
       [&] { return bitwise_equal(da_s, da_p); }},
      {"matmul_grad_b",
       [&] { ks::matmul_grad_b(A.data(), dC.data(), db_s.data(), m, k, n); },
       [&] { kp::matmul_grad_b(A.data(), dC.data(), db_p.data(), m, k, n); },
       [&] { return bitwise_equal(db_s, db_p); }},
      {"conv3x3",
       [&] { ks::conv3x3(X.data(), Wt.data(), cv_s.data(), H, W, cin, cout); },
       [&] { kp::conv3x3(X.data(), Wt.data(), cv_p.data(), H, W, cin, cout); },
       [&] { return bitwise_equal(cv_s, cv_p); }},
      {"conv3x3_grad_x",
       [&] {
         ks::conv3x3_grad_x(dY.data(), Wt.data(), cx_s.data(), H, W, cin,
                            cout);
       },
       [&] {
         kp::conv3x3_grad_x(dY.data(), Wt.data(), cx_p.data(), H, W, cin,
                            cout);
       },
       [&] { return bitwise_equal(cx_s, cx_p); }},
      {"conv3x3_grad_w",
       [&] {
         ks::conv3x3_grad_w(X.data(), dY.data(), cw_s.data(), H, W, cin,
                            cout);
       },
       [&] {
         kp::conv3x3_grad_w(X.data(), dY.data(), cw_p.data(), H, W, cin,
                            cout);
       },
       [&] { return bitwise_equal(cw_s, cw_p); }},
      {"layer_norm",
       [&] {
         ks::layer_norm(R.data(), ln_s.data(), rm, rn, 1e-5, mu_s.data(),
                        is_s.data());
       },
       [&] {
         kp::layer_norm(R.data(), ln_p.data(), rm, rn, 1e-5, mu_p.data(),
                        is_p.data());
       },
       [&] {
         return bitwise_equal(ln_s, ln_p) && bitwise_equal(mu_s, mu_p) &&
                bitwise_equal(is_s, is_p);
       }},
      {"layer_norm_grad",
       [&] {
         ks::layer_norm_grad(R.data(), dR.data(), lng_s.data(), rm, rn,
                             mu_s.data(), is_s.data());
       },
       [&] {
         kp::layer_norm_grad(R.data(), dR.data(), lng_p.data(), rm, rn,
                             mu_p.data(), is_p.data());
       },
       [&] { return bitwise_equal(lng_s, lng_p); }},
      {"softmax_rows",
       [&] { ks::softmax_rows(R.data(), sm_s.data(), rm, rn); },
       [&] { kp::softmax_rows(R.data(), sm_p.data(), rm, rn); },
       [&] { return bitwise_equal(sm_s, sm_p); }},
      {"leaky_relu",
       [&] { ks::leaky_relu(R.data(), lr_s.data(), R.size(), 0.01f); },
       [&] { kp::leaky_relu(R.data(), lr_p.data(), R.size(), 0.01f); },
       [&] { return bitwise_equal(lr_s, lr_p); }},
  };

  return run(cases, reps);
}
