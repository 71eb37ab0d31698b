#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vitprune/matrix.hpp"
#include "vitprune/tape.hpp"

namespace vitprune {

// Shared checkpoint format: a JSON manifest listing parameter names, shapes,
// dtype and byte offsets, plus a sidecar binary of little-endian 32-bit
// floats concatenated in manifest order. Round-trips are bit-exact for
// float-valued parameters.

template <typename S>
std::vector<float> to_f32_bytes(const Param<S>& p) {
    std::vector<float> out(static_cast<size_t>(p.value.size()));
    for (Index i = 0; i < p.value.size(); ++i) {
        out[static_cast<size_t>(i)] = static_cast<float>(p.value.data()[i]);
    }
    return out;
}

template <typename S>
void save_checkpoint(const std::string& manifest_path, const std::string& bin_path,
                     const NamedParams<S>& params) {
    nlohmann::json manifest;
    manifest["format"] = "vitprune-checkpoint-v1";
    manifest["dtype"] = "f32";
    manifest["params"] = nlohmann::json::array();

    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin) {
        throw std::runtime_error("cannot open for writing: " + bin_path);
    }
    size_t offset = 0;
    for (const auto& [name, p] : params) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = {p->value.rows(), p->value.cols()};
        e["dtype"] = "f32";
        e["offset"] = offset;
        manifest["params"].push_back(e);
        std::vector<float> buf = to_f32_bytes(*p);
        bin.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
        offset += buf.size() * sizeof(float);
    }
    bin.close();

    std::ofstream mf(manifest_path, std::ios::trunc);
    if (!mf) {
        throw std::runtime_error("cannot open for writing: " + manifest_path);
    }
    mf << manifest.dump(2) << "\n";
}

template <typename S>
void load_checkpoint(const std::string& manifest_path, const std::string& bin_path,
                     const NamedParams<S>& params) {
    std::ifstream mf(manifest_path);
    if (!mf) {
        throw std::runtime_error("cannot open checkpoint manifest: " + manifest_path);
    }
    nlohmann::json manifest = nlohmann::json::parse(mf);

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) {
        throw std::runtime_error("cannot open checkpoint data: " + bin_path);
    }

    std::unordered_map<std::string, Param<S>*> by_name;
    for (const auto& [name, p] : params) {
        by_name[name] = p;
    }

    size_t loaded = 0;
    for (const auto& e : manifest.at("params")) {
        const std::string name = e.at("name").get<std::string>();
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            continue;  // checkpoint may carry more groups than the caller asked for
        }
        Param<S>& p = *it->second;
        auto shape = e.at("shape").get<std::vector<long>>();
        if (shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols()) {
            throw std::runtime_error("checkpoint shape mismatch for " + name);
        }
        const size_t count = static_cast<size_t>(p.value.size());
        std::vector<float> buf(count);
        bin.seekg(static_cast<std::streamoff>(e.at("offset").get<size_t>()));
        bin.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(count * sizeof(float)));
        if (!bin) {
            throw std::runtime_error("checkpoint data truncated at " + name);
        }
        for (Index i = 0; i < p.value.size(); ++i) {
            p.value.data()[i] = static_cast<S>(buf[static_cast<size_t>(i)]);
        }
        p.grad = Mat<S>::Zero(p.value.rows(), p.value.cols());
        ++loaded;
    }
    if (loaded != params.size()) {
        throw std::runtime_error("checkpoint is missing " +
                                 std::to_string(params.size() - loaded) + " parameter(s)");
    }
}

inline std::vector<std::string> checkpoint_param_names(const std::string& manifest_path) {
    std::ifstream mf(manifest_path);
    if (!mf) {
        throw std::runtime_error("cannot open checkpoint manifest: " + manifest_path);
    }
    nlohmann::json manifest = nlohmann::json::parse(mf);
    std::vector<std::string> names;
    for (const auto& e : manifest.at("params")) {
        names.push_back(e.at("name").get<std::string>());
    }
    return names;
}

// FNV-1a over the f32 serialization of all parameters whose name starts with
// `prefix`. Used to assert which parameter groups an update touched.
template <typename S>
uint64_t param_group_hash(const NamedParams<S>& params, const std::string& prefix) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, p] : params) {
        if (name.rfind(prefix, 0) != 0) {
            continue;
        }
        std::vector<float> buf = to_f32_bytes(*p);
        const auto* bytes = reinterpret_cast<const unsigned char*>(buf.data());
        for (size_t i = 0; i < buf.size() * sizeof(float); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

}  // namespace vitprune
