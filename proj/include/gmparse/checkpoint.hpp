#pragma once

#include <bit>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gmparse/tensor.hpp"

namespace gmparse {

// Checkpoint layout: one line of JSON (header), '\n', then the raw value
// blobs concatenated in header order, little-endian.
static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");

template <class T>
const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "float32";
    else if constexpr (std::is_same_v<T, double>) return "float64";
    else static_assert(sizeof(T) == 0, "unsupported checkpoint dtype");
}

template <class T>
using NamedTensors = std::vector<std::pair<std::string, TensorND<T>*>>;

template <class T>
void save_checkpoint(const std::string& path, const NamedTensors<T>& tensors, const nlohmann::json& meta) {
    nlohmann::json header;
    header["version"] = 1;
    header["dtype"] = dtype_name<T>();
    header["meta"] = meta;
    auto& list = header["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : tensors) list.push_back({{"name", name}, {"shape", t->shape}});
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f << header.dump() << '\n';
    for (const auto& [name, t] : tensors)
        f.write(reinterpret_cast<const char*>(t->data.data()), std::streamsize(t->data.size() * sizeof(T)));
    if (!f) throw IoError("short write to checkpoint: " + path);
}

inline nlohmann::json read_checkpoint_header(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(f, line)) throw IoError("checkpoint has no header line: " + path);
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded()) throw IoError("checkpoint header is not valid JSON: " + path);
    return header;
}

// Loads blobs into the given tensors; names, order, shapes, and dtype must
// match the header exactly. Returns the stored meta object.
template <class T>
nlohmann::json load_checkpoint(const std::string& path, const NamedTensors<T>& tensors) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(f, line)) throw IoError("checkpoint has no header line: " + path);
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded()) throw IoError("checkpoint header is not valid JSON: " + path);
    if (header.value("version", 0) != 1) throw IoError("unsupported checkpoint version in " + path);
    if (header.value("dtype", "") != dtype_name<T>())
        throw IoError("checkpoint dtype " + header.value("dtype", "") + " does not match " + dtype_name<T>());
    const auto& list = header.at("tensors");
    if (list.size() != tensors.size())
        throw IoError("checkpoint stores " + std::to_string(list.size()) + " tensors, expected " + std::to_string(tensors.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& [name, t] = tensors[i];
        if (list[i].at("name").template get<std::string>() != name)
            throw IoError("checkpoint tensor " + std::to_string(i) + " is '" + list[i].at("name").template get<std::string>() + "', expected '" + name + "'");
        if (list[i].at("shape").template get<Shape>() != t->shape)
            throw IoError("checkpoint tensor '" + name + "' shape mismatch");
    }
    for (const auto& [name, t] : tensors) {
        f.read(reinterpret_cast<char*>(t->data.data()), std::streamsize(t->data.size() * sizeof(T)));
        if (std::size_t(f.gcount()) != t->data.size() * sizeof(T))
            throw IoError("checkpoint truncated while reading '" + name + "': " + path);
    }
    return header.value("meta", nlohmann::json::object());
}

}  // namespace gmparse
