// Dense row-major tensors. Float for training, double for gradient checking.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace distillforge {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T(0)) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != shape_numel(shape))
            throw std::invalid_argument("tensor: data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    size_t numel() const { return data.size(); }
    size_t rank() const { return shape.size(); }
    size_t dim(size_t i) const { return shape.at(i); }

    // 2-D accessors; rows = shape[0], cols = product of the rest.
    size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    size_t cols() const { return shape.empty() ? 0 : numel() / shape[0]; }

    T& at(size_t r, size_t c) { return data[r * cols() + c]; }
    T at(size_t r, size_t c) const { return data[r * cols() + c]; }

    T item() const {
        if (numel() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(numel()) + " elements");
        return data[0];
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }
};

template <typename T>
inline void check_finite(const char* op, const Tensor<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(double(v)))
            throw std::runtime_error(std::string("non-finite value produced by op '") + op + "' with shape " +
                                     shape_str(t.shape));
}

// ---------------------------------------------------------------------------
// Parameter container format: magic "DFT1", then per-tensor records of
//   u64 name length, UTF-8 name, u64 rank, u64 dims..., f32 LE data.
// ---------------------------------------------------------------------------

namespace detail {
inline void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}
inline uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}
} // namespace detail

inline void save_tensors(const std::string& path,
                         const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write("DFT1", 4);
    for (const auto& [name, t] : tensors) {
        detail::write_u64(os, name.size());
        os.write(name.data(), std::streamsize(name.size()));
        detail::write_u64(os, t.rank());
        for (size_t d : t.shape) detail::write_u64(os, d);
        os.write(reinterpret_cast<const char*>(t.data.data()), std::streamsize(t.data.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::vector<std::pair<std::string, Tensor<float>>> load_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DFT1", 4) != 0)
        throw std::runtime_error("bad magic in tensor container: " + path);
    std::vector<std::pair<std::string, Tensor<float>>> out;
    while (is.peek() != EOF) {
        uint64_t nlen = detail::read_u64(is);
        std::string name(nlen, '\0');
        is.read(name.data(), std::streamsize(nlen));
        uint64_t rank = detail::read_u64(is);
        Shape shape(rank);
        for (auto& d : shape) d = detail::read_u64(is);
        Tensor<float> t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.numel() * sizeof(float)));
        if (!is) throw std::runtime_error("truncated tensor container: " + path);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

} // namespace distillforge
