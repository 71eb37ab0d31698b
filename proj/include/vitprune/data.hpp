#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitprune/matrix.hpp"

namespace vitprune {

template <typename S>
struct Dataset {
    Mat<S> images;  // [M, C*H*W], values in [0, 1]
    std::vector<int> labels;
    int num_classes = 0;
    int channels = 1;
    int height = 0;
    int width = 0;

    Index size() const { return images.rows(); }

    void validate() const {
        if (images.rows() != static_cast<Index>(labels.size())) {
            throw std::invalid_argument("dataset: image/label count mismatch");
        }
        for (int l : labels) {
            if (l < 0 || l >= num_classes) {
                throw std::invalid_argument("dataset: label outside [0, num_classes)");
            }
        }
    }
};

// Synthetic blob classification task: low-amplitude noise plus one bright
// Gaussian blob whose quadrant determines the label (0 upper-left,
// 1 upper-right, 2 lower-left, 3 lower-right), and one dimmer distractor
// blob in another quadrant. Resolving the label means comparing the two
// blobs, so the tokens covering them stay load-bearing through the later
// blocks; that is what gives token pruning real signal on this task.
// Generation is a pure function of (seed, index), so any image can be
// regenerated in isolation.
template <typename S>
Dataset<S> synth_blobs(uint64_t seed, Index count, int image_size, int num_classes = 4) {
    if (image_size < 8) {
        throw std::invalid_argument("synth_blobs: image_size must be >= 8");
    }
    if (num_classes < 2 || num_classes > 4) {
        throw std::invalid_argument("synth_blobs: num_classes must be in [2, 4]");
    }
    Dataset<S> ds;
    ds.num_classes = num_classes;
    ds.channels = 1;
    ds.height = image_size;
    ds.width = image_size;
    ds.images.resize(count, image_size * image_size);
    ds.labels.resize(static_cast<size_t>(count));

    const double half = image_size / 2.0;
    const double margin = image_size / 8.0;
    const double sigma = image_size / 12.0;  // concentrated: a blob spans only a few patches
    auto quadrant_origin = [half](int q) {
        return std::pair<double, double>{(q == 1 || q == 3) ? half : 0.0, q >= 2 ? half : 0.0};
    };
    for (Index i = 0; i < count; ++i) {
        auto rng = make_rng(seed, "synth", static_cast<uint64_t>(i));
        std::uniform_int_distribution<int> label_dist(0, num_classes - 1);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        const int label = label_dist(rng);
        ds.labels[static_cast<size_t>(i)] = label;
        int other = label_dist(rng);
        while (other == label) {
            other = label_dist(rng);
        }
        auto [qx, qy] = quadrant_origin(label);
        const double cx = qx + margin + unit(rng) * (half - 2 * margin);
        const double cy = qy + margin + unit(rng) * (half - 2 * margin);
        auto [ox, oy] = quadrant_origin(other);
        const double dcx = ox + margin + unit(rng) * (half - 2 * margin);
        const double dcy = oy + margin + unit(rng) * (half - 2 * margin);
        for (int y = 0; y < image_size; ++y) {
            for (int x = 0; x < image_size; ++x) {
                const double noise = 0.2 * unit(rng);
                const double b1 = std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) /
                                           (2.0 * sigma * sigma));
                const double b2 = 0.75 * std::exp(-((x - dcx) * (x - dcx) + (y - dcy) * (y - dcy)) /
                                                  (2.0 * sigma * sigma));
                ds.images(i, y * image_size + x) =
                    static_cast<S>(std::min(1.0, std::max(0.0, noise + b1 + b2)));
            }
        }
    }
    return ds;
}

namespace detail {

inline uint32_t read_u32_le(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_u32_le(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

// Raw dataset directory: images.bin holds a header of four 32-bit
// little-endian integers M, C, H, W followed by M*C*H*W unsigned bytes in
// row-major order; labels.csv holds one integer per line. Bytes map to
// [0, 1] by dividing by 255.
template <typename S>
Dataset<S> load_raw(const std::string& dir, int num_classes) {
    const std::string bin_path = dir + "/images.bin";
    const std::string csv_path = dir + "/labels.csv";
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) {
        throw std::runtime_error("cannot open " + bin_path);
    }
    const uint32_t m = detail::read_u32_le(bin);
    const uint32_t c = detail::read_u32_le(bin);
    const uint32_t h = detail::read_u32_le(bin);
    const uint32_t w = detail::read_u32_le(bin);
    if (!bin) {
        throw std::runtime_error("images.bin: truncated header");
    }
    const size_t expect = static_cast<size_t>(m) * c * h * w;
    std::vector<unsigned char> bytes(expect);
    bin.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expect));
    if (static_cast<size_t>(bin.gcount()) != expect) {
        throw std::runtime_error("images.bin: expected " + std::to_string(expect) +
                                 " pixel bytes, got " + std::to_string(bin.gcount()));
    }

    std::ifstream csv(csv_path);
    if (!csv) {
        throw std::runtime_error("cannot open " + csv_path);
    }
    std::vector<int> labels;
    std::string line;
    while (std::getline(csv, line)) {
        if (line.empty()) {
            continue;
        }
        labels.push_back(std::stoi(line));
    }
    if (labels.size() != m) {
        throw std::runtime_error("labels.csv: expected " + std::to_string(m) + " labels, got " +
                                 std::to_string(labels.size()));
    }

    Dataset<S> ds;
    ds.num_classes = num_classes;
    ds.channels = static_cast<int>(c);
    ds.height = static_cast<int>(h);
    ds.width = static_cast<int>(w);
    ds.labels = std::move(labels);
    ds.images.resize(static_cast<Index>(m), static_cast<Index>(c * h * w));
    for (Index i = 0; i < ds.images.rows(); ++i) {
        for (Index j = 0; j < ds.images.cols(); ++j) {
            ds.images(i, j) = static_cast<S>(
                bytes[static_cast<size_t>(i) * static_cast<size_t>(ds.images.cols()) +
                      static_cast<size_t>(j)] /
                255.0);
        }
    }
    ds.validate();
    return ds;
}

// Writes the raw format above, quantizing values to bytes.
template <typename S>
void save_raw(const Dataset<S>& ds, const std::string& dir) {
    std::ofstream bin(dir + "/images.bin", std::ios::binary | std::ios::trunc);
    if (!bin) {
        throw std::runtime_error("cannot write " + dir + "/images.bin");
    }
    detail::write_u32_le(bin, static_cast<uint32_t>(ds.images.rows()));
    detail::write_u32_le(bin, static_cast<uint32_t>(ds.channels));
    detail::write_u32_le(bin, static_cast<uint32_t>(ds.height));
    detail::write_u32_le(bin, static_cast<uint32_t>(ds.width));
    for (Index i = 0; i < ds.images.rows(); ++i) {
        for (Index j = 0; j < ds.images.cols(); ++j) {
            const double v = std::min(1.0, std::max(0.0, static_cast<double>(ds.images(i, j))));
            const auto byte = static_cast<unsigned char>(std::lround(v * 255.0));
            bin.write(reinterpret_cast<const char*>(&byte), 1);
        }
    }
    std::ofstream csv(dir + "/labels.csv", std::ios::trunc);
    if (!csv) {
        throw std::runtime_error("cannot write " + dir + "/labels.csv");
    }
    for (int l : ds.labels) {
        csv << l << "\n";
    }
}

// Deterministic epoch permutation chunked into batches; the last partial
// batch is kept.
inline std::vector<std::vector<int>> minibatches(Index dataset_size, int batch_size,
                                                 uint64_t seed, int epoch) {
    if (batch_size < 1) {
        throw std::invalid_argument("minibatches: batch_size must be >= 1");
    }
    std::vector<int> order(static_cast<size_t>(dataset_size));
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, "order", static_cast<uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<int>> batches;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
        batches.emplace_back(order.begin() + static_cast<long>(start),
                             order.begin() + static_cast<long>(end));
    }
    return batches;
}

}  // namespace vitprune
