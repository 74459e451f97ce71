#pragma once

#include <array>
#include <string>
#include <vector>

#include "mgnet/tensor.hpp"

namespace mgnet {

// Conventional natural-image statistics; the pretrained full backbone assumes
// inputs normalized with these.
inline constexpr std::array<double, 3> kImageMean = {0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kImageStd = {0.229, 0.224, 0.225};

struct Sample {
    std::string id;
    Tensor image;  // [1,3,H,W], RGB in [0,1] before normalization
    Tensor mask;   // [1,1,H,W], strictly {0,1}
};

enum class Split { train, val, test };
std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct DatasetLayout {
    std::string root;
    std::string image_dir = "images";
    std::string mask_dir = "masks";
    Split split = Split::train;
};

// Scans <root>/<split>/<image_dir> for *.png|*.jpg|*.jpeg and pairs each with
// <mask_dir>/<stem>.png. Samples come back sorted by id; masks binarized at
// pixel value >= 128; images resized bilinearly and masks nearest-neighbor to
// input_size x input_size.
std::vector<Sample> load_dataset(const DatasetLayout& layout, int input_size = 384);

// 50% horizontal flip plus a rotation uniform over {0, 90, 180, 270} degrees,
// applied identically to image and mask.
Sample augment(const Sample& s, Rng& rng);

// Per-channel (x - mean) / std. Accepts [N,3,H,W].
Tensor normalize_image(const Tensor& image01);

// Reads an RGB image at its native size -> [1,3,H,W] in [0,1].
Tensor load_image_tensor(const std::string& path);

// Writes a [1,1,H,W] map in [0,1] as an 8-bit grayscale PNG; thresholding at
// 0.5 first when requested.
void save_gray_png(const std::string& path, const Tensor& map01, bool threshold);

// Deterministic synthetic glass-scene dataset: textured background, 1-3
// alpha-blended convex polygons with a specular streak and blurred boundary;
// masks are the exact polygon fill. Positive fraction kept within [1%, 60%]
// by rejection. Emits <out_root>/<split>/{images,masks}/synth_NNNN.png.
void synth_generate(int n, int size, uint64_t seed, const std::string& out_root,
                    const std::string& split = "train");

}  // namespace mgnet
