#pragma once

#include "vicha/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace vicha {

// Single-file array archive: "VICHA1\n" magic, little-endian u64 header
// length, a JSON header ({"meta": ..., "arrays": [{name, rows, cols}...]}),
// then the arrays' float64 payloads in header order, row-major.
struct ArrayArchive {
    std::vector<std::pair<std::string, Mat>> arrays;
    std::string meta_json = "{}";

    const Mat& find(const std::string& name) const;
    bool contains(const std::string& name) const;
};

void write_array_archive(const std::string& path, const ArrayArchive& archive);
ArrayArchive read_array_archive(const std::string& path);

}  // namespace vicha
