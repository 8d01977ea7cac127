#pragma once

// Forward-mode dual number used as an Eigen scalar. Running the reverse-mode
// tape over Dual yields Hessian-vector products (forward-over-reverse).

#include <cmath>
#include <ostream>

#include <Eigen/Core>

namespace drml::ad {

struct Dual {
    double v = 0.0;  // primal
    double d = 0.0;  // tangent

    constexpr Dual() = default;
    constexpr Dual(double value) : v(value) {}  // NOLINT: implicit lift of constants
    constexpr Dual(double value, double tangent) : v(value), d(tangent) {}

    constexpr Dual& operator+=(const Dual& o) { v += o.v; d += o.d; return *this; }
    constexpr Dual& operator-=(const Dual& o) { v -= o.v; d -= o.d; return *this; }
    constexpr Dual& operator*=(const Dual& o) { d = d * o.v + v * o.d; v *= o.v; return *this; }
    constexpr Dual& operator/=(const Dual& o) {
        d = (d * o.v - v * o.d) / (o.v * o.v);
        v /= o.v;
        return *this;
    }
};

constexpr Dual operator+(Dual a, const Dual& b) { return a += b; }
constexpr Dual operator-(Dual a, const Dual& b) { return a -= b; }
constexpr Dual operator*(Dual a, const Dual& b) { return a *= b; }
constexpr Dual operator/(Dual a, const Dual& b) { return a /= b; }
constexpr Dual operator-(const Dual& a) { return {-a.v, -a.d}; }
constexpr Dual operator+(const Dual& a) { return a; }

constexpr bool operator==(const Dual& a, const Dual& b) { return a.v == b.v && a.d == b.d; }
constexpr bool operator!=(const Dual& a, const Dual& b) { return !(a == b); }
constexpr bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
constexpr bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
constexpr bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
constexpr bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }

inline Dual abs(const Dual& a) { return a.v < 0 ? -a : a; }
inline Dual sqrt(const Dual& a) {
    const double s = std::sqrt(a.v);
    return {s, a.d / (2.0 * s)};
}

inline std::ostream& operator<<(std::ostream& os, const Dual& a) {
    return os << a.v << "+" << a.d << "e";
}

inline double primal(double x) { return x; }
inline double primal(const Dual& x) { return x.v; }

inline bool is_finite(double x) { return std::isfinite(x); }
inline bool is_finite(const Dual& x) { return std::isfinite(x.v) && std::isfinite(x.d); }

}  // namespace drml::ad

namespace Eigen {

template <>
struct NumTraits<drml::ad::Dual> : GenericNumTraits<double> {
    using Real = drml::ad::Dual;
    using NonInteger = drml::ad::Dual;
    using Literal = drml::ad::Dual;
    using Nested = drml::ad::Dual;

    enum {
        IsComplex = 0,
        IsInteger = 0,
        IsSigned = 1,
        RequireInitialization = 1,
        ReadCost = 2,
        AddCost = 2,
        MulCost = 4
    };

    static inline Real epsilon() { return Real(NumTraits<double>::epsilon()); }
    static inline Real dummy_precision() { return Real(NumTraits<double>::dummy_precision()); }
    static inline Real highest() { return Real(NumTraits<double>::highest()); }
    static inline Real lowest() { return Real(NumTraits<double>::lowest()); }
    static inline int digits10() { return NumTraits<double>::digits10(); }
};

}  // namespace Eigen
