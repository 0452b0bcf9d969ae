#include "vicha/image.hpp"

#include <cstring>
#include <stdexcept>

namespace vicha {

Eigen::MatrixXd patchify(const Image& img, int patch_size) {
    if (patch_size <= 0 || img.h % patch_size != 0 || img.w % patch_size != 0)
        throw std::invalid_argument("patchify: image dims must be multiples of patch_size");
    const int gy = img.h / patch_size;
    const int gx = img.w / patch_size;
    Eigen::MatrixXd out(gy * gx, img.c * patch_size * patch_size);
    for (int py = 0; py < gy; ++py) {
        for (int px = 0; px < gx; ++px) {
            const int p = py * gx + px;
            int col = 0;
            for (int c = 0; c < img.c; ++c)
                for (int y = 0; y < patch_size; ++y)
                    for (int x = 0; x < patch_size; ++x)
                        out(p, col++) = img.at(c, py * patch_size + y, px * patch_size + x);
        }
    }
    return out;
}

uint64_t image_hash(const Image& img) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    mix(&img.c, sizeof(img.c));
    mix(&img.h, sizeof(img.h));
    mix(&img.w, sizeof(img.w));
    if (!img.data.empty()) mix(img.data.data(), img.data.size() * sizeof(double));
    return h;
}

}  // namespace vicha
