#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace vicha {

// Dense image, values in [0,1], layout data[(c*h + y)*w + x].
struct Image {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<double> data;

    Image() = default;
    Image(int c_, int h_, int w_) : c(c_), h(h_), w(w_), data(static_cast<size_t>(c_) * h_ * w_, 0.0) {}

    double& at(int ch, int y, int x) { return data[(static_cast<size_t>(ch) * h + y) * w + x]; }
    double at(int ch, int y, int x) const { return data[(static_cast<size_t>(ch) * h + y) * w + x]; }

    bool operator==(const Image& o) const {
        return c == o.c && h == o.h && w == o.w && data == o.data;
    }
};

// Rows are patches in grid order (row-major over the patch grid); each row is
// the patch's pixels ordered channel, then y, then x within the patch.
Eigen::MatrixXd patchify(const Image& img, int patch_size);

// Stable 64-bit content hash (FNV-1a over the raw bytes).
uint64_t image_hash(const Image& img);

}  // namespace vicha
