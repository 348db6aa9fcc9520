#pragma once

// Forward-mode dual numbers with a fixed number of tangent directions.
// Nesting Dual<Dual<double, N>, N> yields exact second derivatives, which is
// how the local Hessians of the dynamics and tube terms are obtained.

#include <array>
#include <cmath>
#include <type_traits>

#include <Eigen/Core>

namespace rlrnmpc {

template <typename T, int N>
struct Dual {
  T v{};
  std::array<T, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT(google-explicit-constructor)
  template <typename U, typename = std::enable_if_t<std::is_same_v<U, T> && !std::is_same_v<T, double>>>
  Dual(const U& value) : v(value) {}  // NOLINT(google-explicit-constructor)

  static Dual variable(const T& value, int index) {
    Dual x;
    x.v = value;
    x.d[index] = T(1.0);
    return x;
  }

  Dual& operator+=(const Dual& o) {
    v += o.v;
    for (int i = 0; i < N; ++i) d[i] += o.d[i];
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    for (int i = 0; i < N; ++i) d[i] -= o.d[i];
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    for (int i = 0; i < N; ++i) d[i] = d[i] * o.v + v * o.d[i];
    v *= o.v;
    return *this;
  }
  Dual& operator/=(const Dual& o) {
    const T inv = T(1.0) / o.v;
    v *= inv;
    for (int i = 0; i < N; ++i) d[i] = (d[i] - v * o.d[i]) * inv;
    return *this;
  }
};

template <typename T, int N>
Dual<T, N> operator-(Dual<T, N> a) {
  a.v = -a.v;
  for (auto& di : a.d) di = -di;
  return a;
}
template <typename T, int N>
Dual<T, N> operator+(Dual<T, N> a, const Dual<T, N>& b) { return a += b; }
template <typename T, int N>
Dual<T, N> operator-(Dual<T, N> a, const Dual<T, N>& b) { return a -= b; }
template <typename T, int N>
Dual<T, N> operator*(Dual<T, N> a, const Dual<T, N>& b) { return a *= b; }
template <typename T, int N>
Dual<T, N> operator/(Dual<T, N> a, const Dual<T, N>& b) { return a /= b; }

template <typename T, int N>
Dual<T, N> operator+(Dual<T, N> a, double b) { a.v += b; return a; }
template <typename T, int N>
Dual<T, N> operator+(double b, Dual<T, N> a) { a.v += b; return a; }
template <typename T, int N>
Dual<T, N> operator-(Dual<T, N> a, double b) { a.v -= b; return a; }
template <typename T, int N>
Dual<T, N> operator-(double b, const Dual<T, N>& a) { return -(a - b); }
template <typename T, int N>
Dual<T, N> operator*(Dual<T, N> a, double b) {
  a.v *= b;
  for (auto& di : a.d) di *= b;
  return a;
}
template <typename T, int N>
Dual<T, N> operator*(double b, Dual<T, N> a) { return a * b; }
template <typename T, int N>
Dual<T, N> operator/(Dual<T, N> a, double b) { return a * (1.0 / b); }
template <typename T, int N>
Dual<T, N> operator/(double b, const Dual<T, N>& a) { return Dual<T, N>(b) / a; }

// Chain rule helper: f(a) with f'(a.v) = slope.
template <typename T, int N>
Dual<T, N> chain(const Dual<T, N>& a, const T& value, const T& slope) {
  Dual<T, N> r;
  r.v = value;
  for (int i = 0; i < N; ++i) r.d[i] = slope * a.d[i];
  return r;
}

template <typename T, int N>
Dual<T, N> sin(const Dual<T, N>& a) {
  using std::cos;
  using std::sin;
  return chain(a, T(sin(a.v)), T(cos(a.v)));
}
template <typename T, int N>
Dual<T, N> cos(const Dual<T, N>& a) {
  using std::cos;
  using std::sin;
  return chain(a, T(cos(a.v)), T(-sin(a.v)));
}
template <typename T, int N>
Dual<T, N> sqrt(const Dual<T, N>& a) {
  using std::sqrt;
  const T r = sqrt(a.v);
  return chain(a, r, T(0.5 / r));
}

template <typename T, int N>
Dual<T, N> exp(const Dual<T, N>& a) {
  using std::exp;
  const T e = exp(a.v);
  return chain(a, e, e);
}

inline double value_of(double x) { return x; }
template <typename T, int N>
double value_of(const Dual<T, N>& x) { return value_of(x.v); }

// First and second derivative extraction for a scalar computed with
// Dual<Dual<double, N>, N> seeded by `seed_hessian_variables`.
template <int N>
using Dual2 = Dual<Dual<double, N>, N>;

template <int N>
Dual2<N> hessian_variable(double value, int index) {
  Dual2<N> x;
  x.v = Dual<double, N>::variable(value, index);
  x.d[index] = Dual<double, N>(1.0);
  return x;
}

template <int N>
Eigen::Matrix<double, N, 1> gradient_of(const Dual2<N>& f) {
  Eigen::Matrix<double, N, 1> g;
  for (int i = 0; i < N; ++i) g(i) = f.v.d[i];
  return g;
}

template <int N>
Eigen::Matrix<double, N, N> hessian_of(const Dual2<N>& f) {
  Eigen::Matrix<double, N, N> h;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) h(i, j) = f.d[i].d[j];
  return 0.5 * (h + h.transpose());
}

}  // namespace rlrnmpc
