#include "mgnet/data.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>

namespace fs = std::filesystem;

namespace mgnet {

std::string split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    fail("unknown split: '" + name + "'");
}

namespace {

bool has_image_ext(const fs::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ".png" || e == ".jpg" || e == ".jpeg";
}

Tensor image_to_tensor(const cv::Mat& bgr) {
    Tensor t = Tensor::zeros({1, 3, bgr.rows, bgr.cols});
    for (int y = 0; y < bgr.rows; ++y)
        for (int x = 0; x < bgr.cols; ++x) {
            const cv::Vec3b px = bgr.at<cv::Vec3b>(y, x);
            t.at(0, 0, y, x) = px[2] / 255.0;  // R
            t.at(0, 1, y, x) = px[1] / 255.0;  // G
            t.at(0, 2, y, x) = px[0] / 255.0;  // B
        }
    return t;
}

Tensor mask_to_tensor(const cv::Mat& gray) {
    Tensor t = Tensor::zeros({1, 1, gray.rows, gray.cols});
    for (int y = 0; y < gray.rows; ++y)
        for (int x = 0; x < gray.cols; ++x)
            t.at(0, 0, y, x) = gray.at<uint8_t>(y, x) >= 128 ? 1.0 : 0.0;
    return t;
}

}  // namespace

std::vector<Sample> load_dataset(const DatasetLayout& layout, int input_size) {
    check(input_size >= 32 && input_size % 32 == 0, "input_size must be a positive multiple of 32");
    const fs::path base = fs::path(layout.root) / split_name(layout.split);
    const fs::path img_root = base / layout.image_dir;
    const fs::path mask_root = base / layout.mask_dir;

    std::vector<Sample> out;
    if (!fs::exists(img_root)) {
        std::cerr << "warning: dataset directory " << img_root << " does not exist; "
                  << "returning an empty dataset\n";
        return out;
    }

    std::map<std::string, fs::path> images;
    for (const auto& entry : fs::directory_iterator(img_root)) {
        if (!entry.is_regular_file() || !has_image_ext(entry.path())) continue;
        const std::string stem = entry.path().stem().string();
        check(images.emplace(stem, entry.path()).second,
              "duplicate image stem '" + stem + "' in " + img_root.string());
    }
    if (images.empty())
        std::cerr << "warning: no images found under " << img_root << "\n";

    // every mask must pair with an image
    if (fs::exists(mask_root))
        for (const auto& entry : fs::directory_iterator(mask_root)) {
            if (!entry.is_regular_file() || !has_image_ext(entry.path())) continue;
            const std::string stem = entry.path().stem().string();
            check(images.count(stem) > 0,
                  "unpaired mask without image: " + entry.path().string());
        }

    for (const auto& [stem, img_path] : images) {
        const fs::path mask_path = mask_root / (stem + ".png");
        check(fs::exists(mask_path), "unpaired image without mask: " + img_path.string());

        cv::Mat img = cv::imread(img_path.string(), cv::IMREAD_COLOR);
        check(!img.empty(), "unreadable image file: " + img_path.string());
        cv::Mat mask = cv::imread(mask_path.string(), cv::IMREAD_GRAYSCALE);
        check(!mask.empty(), "unreadable mask file: " + mask_path.string());
        check(img.rows == mask.rows && img.cols == mask.cols,
              "image/mask size mismatch for '" + stem + "'");

        if (img.rows != input_size || img.cols != input_size) {
            cv::resize(img, img, cv::Size(input_size, input_size), 0, 0, cv::INTER_LINEAR);
            cv::resize(mask, mask, cv::Size(input_size, input_size), 0, 0, cv::INTER_NEAREST);
        }
        Sample s;
        s.id = stem;
        s.image = image_to_tensor(img);
        s.mask = mask_to_tensor(mask);
        out.push_back(std::move(s));
    }
    return out;  // std::map iteration already sorted by id
}

namespace {

Tensor flip_w(const Tensor& t) {
    Tensor o = Tensor::zeros(t.shape());
    const int64_t C = t.dim(1), H = t.dim(2), W = t.dim(3);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) o.at(0, c, y, x) = t.at(0, c, y, W - 1 - x);
    return o;
}

// quarter-turns counterclockwise
Tensor rot90k(const Tensor& t, int k) {
    k = ((k % 4) + 4) % 4;
    if (k == 0) return t;
    const int64_t C = t.dim(1), H = t.dim(2), W = t.dim(3);
    Shape os = k % 2 == 0 ? Shape{1, C, H, W} : Shape{1, C, W, H};
    Tensor o = Tensor::zeros(os);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const double v = t.at(0, c, y, x);
                if (k == 1) o.at(0, c, W - 1 - x, y) = v;
                else if (k == 2) o.at(0, c, H - 1 - y, W - 1 - x) = v;
                else o.at(0, c, x, H - 1 - y) = v;
            }
    return o;
}

}  // namespace

Sample augment(const Sample& s, Rng& rng) {
    const bool flip = rng.bernoulli(0.5);
    const int quarter_turns = static_cast<int>(rng.uniform_int(0, 3));
    Sample out;
    out.id = s.id;
    out.image = s.image;
    out.mask = s.mask;
    if (flip) {
        out.image = flip_w(out.image);
        out.mask = flip_w(out.mask);
    }
    if (quarter_turns != 0) {
        out.image = rot90k(out.image, quarter_turns);
        out.mask = rot90k(out.mask, quarter_turns);
    }
    return out;
}

Tensor normalize_image(const Tensor& image01) {
    check(image01.ndim() == 4 && image01.dim(1) == 3, "normalize_image expects [N,3,H,W]");
    Tensor o = Tensor::zeros(image01.shape());
    const int64_t N = image01.dim(0), H = image01.dim(2), W = image01.dim(3);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < 3; ++c) {
            const double m = kImageMean[static_cast<size_t>(c)];
            const double sd = kImageStd[static_cast<size_t>(c)];
            const double* src = image01.data() + ((n * 3 + c) * H) * W;
            double* dst = o.data() + ((n * 3 + c) * H) * W;
            for (int64_t i = 0; i < H * W; ++i) dst[i] = (src[i] - m) / sd;
        }
    return o;
}

Tensor load_image_tensor(const std::string& path) {
    cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
    check(!img.empty(), "unreadable image file: " + path);
    return image_to_tensor(img);
}

void save_gray_png(const std::string& path, const Tensor& map01, bool threshold) {
    check(map01.ndim() == 4 && map01.dim(0) == 1 && map01.dim(1) == 1,
          "save_gray_png expects a [1,1,H,W] map");
    const int h = static_cast<int>(map01.dim(2));
    const int w = static_cast<int>(map01.dim(3));
    cv::Mat out(h, w, CV_8UC1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double v = map01.at(0, 0, y, x);
            out.at<uint8_t>(y, x) =
                threshold ? (v >= 0.5 ? 255 : 0)
                          : static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
    check(cv::imwrite(path, out), "failed to write " + path);
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

namespace {

std::vector<cv::Point> random_convex_polygon(Rng& rng, int size) {
    const double cx = rng.uniform(0.2, 0.8) * size;
    const double cy = rng.uniform(0.2, 0.8) * size;
    const double base_r = rng.uniform(0.18, 0.35) * size;
    const int k = static_cast<int>(rng.uniform_int(5, 9));
    std::vector<cv::Point> pts;
    for (int i = 0; i < k; ++i) {
        const double ang = 2.0 * M_PI * (i + rng.uniform(0.0, 0.6)) / k;
        const double r = base_r * rng.uniform(0.6, 1.0);
        pts.emplace_back(static_cast<int>(cx + r * std::cos(ang)),
                         static_cast<int>(cy + r * std::sin(ang)));
    }
    std::vector<cv::Point> hull;
    cv::convexHull(pts, hull);
    return hull;
}

cv::Mat make_background(Rng& rng, int size) {
    cv::Mat bg(size, size, CV_32FC3);
    const cv::Vec3f c0(static_cast<float>(rng.uniform(0.15, 0.7)),
                       static_cast<float>(rng.uniform(0.15, 0.7)),
                       static_cast<float>(rng.uniform(0.15, 0.7)));
    const cv::Vec3f c1(static_cast<float>(rng.uniform(0.15, 0.7)),
                       static_cast<float>(rng.uniform(0.15, 0.7)),
                       static_cast<float>(rng.uniform(0.15, 0.7)));
    const bool horizontal = rng.bernoulli(0.5);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const float t = static_cast<float>(horizontal ? x : y) / static_cast<float>(size - 1);
            bg.at<cv::Vec3f>(y, x) = c0 * (1.0f - t) + c1 * t;
        }
    // scatter a few flat rectangles for texture
    const int nrect = static_cast<int>(rng.uniform_int(3, 7));
    for (int i = 0; i < nrect; ++i) {
        const int w = static_cast<int>(rng.uniform(0.05, 0.3) * size);
        const int h = static_cast<int>(rng.uniform(0.05, 0.3) * size);
        const int x0 = static_cast<int>(rng.uniform_int(0, std::max(1, size - w)));
        const int y0 = static_cast<int>(rng.uniform_int(0, std::max(1, size - h)));
        const cv::Vec3f col(static_cast<float>(rng.uniform(0.1, 0.9)),
                            static_cast<float>(rng.uniform(0.1, 0.9)),
                            static_cast<float>(rng.uniform(0.1, 0.9)));
        cv::rectangle(bg, cv::Rect(x0, y0, w, h), cv::Scalar(col[0], col[1], col[2]), cv::FILLED);
    }
    // mild pixel noise
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            cv::Vec3f& px = bg.at<cv::Vec3f>(y, x);
            for (int c = 0; c < 3; ++c)
                px[c] = std::clamp(px[c] + static_cast<float>(rng.normal(0.0, 0.02)), 0.0f, 1.0f);
        }
    return bg;
}

}  // namespace

void synth_generate(int n, int size, uint64_t seed, const std::string& out_root,
                    const std::string& split) {
    check(n >= 0, "synth_generate: n must be nonnegative");
    check(size >= 32, "synth_generate: size must be at least 32");
    Rng rng(seed);

    const fs::path base = fs::path(out_root) / split;
    fs::create_directories(base / "images");
    fs::create_directories(base / "masks");

    for (int i = 0; i < n; ++i) {
        cv::Mat img, mask;
        for (int attempt = 0; attempt < 100; ++attempt) {
            img = make_background(rng, size);
            mask = cv::Mat::zeros(size, size, CV_8UC1);
            const int npoly = static_cast<int>(rng.uniform_int(1, 3));
            std::vector<std::vector<cv::Point>> polys;
            for (int p = 0; p < npoly; ++p) polys.push_back(random_convex_polygon(rng, size));
            for (const auto& poly : polys) cv::fillConvexPoly(mask, poly, cv::Scalar(255));

            const double frac = static_cast<double>(cv::countNonZero(mask)) /
                                static_cast<double>(size * size);
            if (frac < 0.05 || frac > 0.60) continue;  // reject and redraw

            // glass rendering: alpha blend toward a tint + specular streak
            const double alpha = rng.uniform(0.45, 0.65);
            const cv::Vec3f tint(static_cast<float>(rng.uniform(0.55, 0.85)),
                                 static_cast<float>(rng.uniform(0.6, 0.9)),
                                 static_cast<float>(rng.uniform(0.6, 0.95)));
            const double streak_angle = rng.uniform(0.0, M_PI);
            const double streak_pos = rng.uniform(0.2, 0.8) * size;
            const double streak_width = rng.uniform(0.02, 0.06) * size;
            const double streak_gain = rng.uniform(0.15, 0.35);
            const double nx = std::cos(streak_angle), ny = std::sin(streak_angle);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    if (mask.at<uint8_t>(y, x) == 0) continue;
                    cv::Vec3f& px = img.at<cv::Vec3f>(y, x);
                    for (int c = 0; c < 3; ++c)
                        px[c] = static_cast<float>(alpha * px[c] + (1.0 - alpha) * tint[c]);
                    const double dist = std::abs(nx * x + ny * y - streak_pos);
                    if (dist < streak_width) {
                        const float s = static_cast<float>(
                            streak_gain * (1.0 - dist / streak_width));
                        for (int c = 0; c < 3; ++c) px[c] = std::min(1.0f, px[c] + s);
                    }
                }

            // soften only the boundary band so interiors stay crisp
            cv::Mat blurred;
            cv::GaussianBlur(img, blurred, cv::Size(3, 3), 1.0);
            cv::Mat dil, ero;
            cv::dilate(mask, dil, cv::Mat(), cv::Point(-1, -1), 1);
            cv::erode(mask, ero, cv::Mat(), cv::Point(-1, -1), 1);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    if (dil.at<uint8_t>(y, x) != ero.at<uint8_t>(y, x))
                        img.at<cv::Vec3f>(y, x) = blurred.at<cv::Vec3f>(y, x);
            break;
        }

        cv::Mat img8;
        img.convertTo(img8, CV_8UC3, 255.0);
        char name[32];
        std::snprintf(name, sizeof(name), "synth_%04d.png", i);
        const std::string img_path = (base / "images" / name).string();
        const std::string mask_path = (base / "masks" / name).string();
        check(cv::imwrite(img_path, img8), "failed to write " + img_path);
        check(cv::imwrite(mask_path, mask), "failed to write " + mask_path);
    }
}

}  // namespace mgnet
