#include "totem/gradcheck.hpp"

#include <cmath>

#include "totem/fusion.hpp"
#include "totem/rng.hpp"
#include "totem/tracker.hpp"

namespace totem {

GradCheckResult check_function(const std::string& name, std::vector<Param*> params,
                               const std::function<Var(Tape&)>& build, double step,
                               double tolerance) {
    GradCheckResult result;
    result.op = name;
    for (Param* p : params) p->zero_grad();
    {
        Tape tape;
        Var loss = build(tape);
        tape.backward(loss);
    }
    auto eval = [&]() {
        Tape tape;
        return tape.val(build(tape)).data[0];
    };
    double worst = 0.0;
    for (Param* p : params) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double saved = p->value.data[i];
            p->value.data[i] = saved + step;
            const double fp = eval();
            p->value.data[i] = saved - step;
            const double fm = eval();
            p->value.data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = p->grad.data[i];
            const double rel = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), 1.0});
            worst = std::max(worst, rel);
        }
    }
    result.max_rel_error = worst;
    result.passed = worst < tolerance;
    return result;
}

namespace {

Param random_param(const std::string& name, std::vector<std::size_t> shape, Rng& rng,
                   double scale = 1.0) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = scale * rng.gaussian();
    return Param(name, std::move(t));
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = rng.gaussian();
    return t;
}

using CheckFn = std::function<GradCheckResult(Rng&)>;

struct RegisteredCheck {
    std::string name;
    bool in_fusion_scope;
    bool in_tracker_scope;
    CheckFn run;
};

std::vector<RegisteredCheck> build_registry() {
    std::vector<RegisteredCheck> reg;
    auto prim = [&](const std::string& name, CheckFn fn) {
        reg.push_back({name, true, true, std::move(fn)});
    };

    // A scalar readout with an asymmetric target so gradients are generic.
    auto mse = [](Tape& t, Var v, const Tensor& target) { return t.mse_loss(v, target); };

    prim("add", [=](Rng& rng) {
        Param a = random_param("a", {3, 4}, rng), b = random_param("b", {3, 4}, rng);
        Tensor tgt = random_tensor({3, 4}, rng);
        return check_function("add", {&a, &b}, [&](Tape& t) {
            return mse(t, t.add(t.param(a), t.param(b)), tgt);
        });
    });
    prim("sub", [=](Rng& rng) {
        Param a = random_param("a", {3, 4}, rng), b = random_param("b", {3, 4}, rng);
        Tensor tgt = random_tensor({3, 4}, rng);
        return check_function("sub", {&a, &b}, [&](Tape& t) {
            return mse(t, t.sub(t.param(a), t.param(b)), tgt);
        });
    });
    prim("mul", [=](Rng& rng) {
        Param a = random_param("a", {3, 4}, rng), b = random_param("b", {3, 4}, rng);
        Tensor tgt = random_tensor({3, 4}, rng);
        return check_function("mul", {&a, &b}, [&](Tape& t) {
            return mse(t, t.mul(t.param(a), t.param(b)), tgt);
        });
    });
    prim("scale", [=](Rng& rng) {
        Param a = random_param("a", {3, 4}, rng);
        Tensor tgt = random_tensor({3, 4}, rng);
        return check_function("scale", {&a}, [&](Tape& t) {
            return mse(t, t.scale(t.param(a), -1.7), tgt);
        });
    });
    prim("relu", [=](Rng& rng) {
        // Keep values away from the kink, where finite differences are wrong.
        Param a = random_param("a", {3, 4}, rng);
        for (double& v : a.value.data)
            if (std::abs(v) < 1e-3) v = 0.5;
        Tensor tgt = random_tensor({3, 4}, rng);
        return check_function("relu", {&a}, [&](Tape& t) {
            return mse(t, t.relu(t.param(a)), tgt);
        });
    });
    prim("softplus", [=](Rng& rng) {
        Param a = random_param("a", {3, 4}, rng);
        Tensor tgt = random_tensor({3, 4}, rng);
        return check_function("softplus", {&a}, [&](Tape& t) {
            return mse(t, t.softplus(t.param(a)), tgt);
        });
    });
    prim("reshape", [=](Rng& rng) {
        Param a = random_param("a", {3, 4}, rng);
        Tensor tgt = random_tensor({2, 6}, rng);
        return check_function("reshape", {&a}, [&](Tape& t) {
            return mse(t, t.reshape(t.param(a), {2, 6}), tgt);
        });
    });
    prim("matmul", [=](Rng& rng) {
        Param a = random_param("a", {3, 5}, rng), b = random_param("b", {5, 4}, rng);
        Tensor tgt = random_tensor({3, 4}, rng);
        return check_function("matmul", {&a, &b}, [&](Tape& t) {
            return mse(t, t.matmul(t.param(a), t.param(b)), tgt);
        });
    });
    prim("linear", [=](Rng& rng) {
        Param x = random_param("x", {3, 5}, rng), w = random_param("w", {5, 4}, rng),
              b = random_param("b", {1, 4}, rng);
        Tensor tgt = random_tensor({3, 4}, rng);
        return check_function("linear", {&x, &w, &b}, [&](Tape& t) {
            return mse(t, t.linear(t.param(x), t.param(w), t.param(b)), tgt);
        });
    });
    prim("softmax_rows", [=](Rng& rng) {
        Param a = random_param("a", {3, 5}, rng);
        Tensor tgt = random_tensor({3, 5}, rng);
        return check_function("softmax_rows", {&a}, [&](Tape& t) {
            return mse(t, t.softmax_rows(t.param(a)), tgt);
        });
    });
    prim("layer_norm", [=](Rng& rng) {
        Param x = random_param("x", {4, 6}, rng), g = random_param("g", {1, 6}, rng),
              b = random_param("b", {1, 6}, rng);
        Tensor tgt = random_tensor({4, 6}, rng);
        return check_function("layer_norm", {&x, &g, &b}, [&](Tape& t) {
            return mse(t, t.layer_norm(t.param(x), t.param(g), t.param(b), 1e-5), tgt);
        });
    });
    prim("instance_norm", [=](Rng& rng) {
        Param x = random_param("x", {8, 3}, rng);
        Tensor tgt = random_tensor({8, 3}, rng);
        return check_function("instance_norm", {&x}, [&](Tape& t) {
            return mse(t, t.instance_norm(t.param(x), 4, 1e-5), tgt);
        });
    });
    prim("concat_rows", [=](Rng& rng) {
        Param a = random_param("a", {2, 4}, rng), b = random_param("b", {3, 4}, rng);
        Tensor tgt = random_tensor({5, 4}, rng);
        return check_function("concat_rows", {&a, &b}, [&](Tape& t) {
            return mse(t, t.concat_rows({t.param(a), t.param(b)}), tgt);
        });
    });
    prim("slice_rows", [=](Rng& rng) {
        Param a = random_param("a", {5, 4}, rng);
        Tensor tgt = random_tensor({2, 4}, rng);
        return check_function("slice_rows", {&a}, [&](Tape& t) {
            return mse(t, t.slice_rows(t.param(a), 1, 2), tgt);
        });
    });
    prim("concat_cols", [=](Rng& rng) {
        Param a = random_param("a", {3, 2}, rng), b = random_param("b", {3, 4}, rng);
        Tensor tgt = random_tensor({3, 6}, rng);
        return check_function("concat_cols", {&a, &b}, [&](Tape& t) {
            return mse(t, t.concat_cols(t.param(a), t.param(b)), tgt);
        });
    });
    prim("tile_rows", [=](Rng& rng) {
        Param a = random_param("a", {1, 4}, rng);
        Tensor tgt = random_tensor({5, 4}, rng);
        return check_function("tile_rows", {&a}, [&](Tape& t) {
            return mse(t, t.tile_rows(t.param(a), 5), tgt);
        });
    });
    prim("build_tokens", [=](Rng& rng) {
        Param x = random_param("x", {4, 3}, rng), xp = random_param("xp", {4, 3}, rng),
              q = random_param("q", {1, 3}, rng);
        Tensor tgt = random_tensor({12, 3}, rng);
        return check_function("build_tokens", {&x, &xp, &q}, [&](Tape& t) {
            Var query = t.tile_rows(t.param(q), 1);
            return mse(t, t.build_tokens(t.param(x), t.param(xp), query), tgt);
        });
    });
    prim("take_group_row", [=](Rng& rng) {
        Param a = random_param("a", {12, 3}, rng);
        Tensor tgt = random_tensor({4, 3}, rng);
        return check_function("take_group_row", {&a}, [&](Tape& t) {
            return mse(t, t.take_group_row(t.param(a), 3, 2), tgt);
        });
    });
    prim("grouped_attention", [=](Rng& rng) {
        Param q = random_param("q", {6, 4}, rng), k = random_param("k", {6, 4}, rng),
              v = random_param("v", {6, 4}, rng);
        Tensor tgt = random_tensor({6, 4}, rng);
        return check_function("grouped_attention", {&q, &k, &v}, [&](Tape& t) {
            return mse(t, t.grouped_attention(t.param(q), t.param(k), t.param(v), 3, 2), tgt);
        });
    });
    prim("grouped_cross_attention", [=](Rng& rng) {
        Param q = random_param("q", {2, 4}, rng), k = random_param("k", {6, 4}, rng),
              v = random_param("v", {6, 4}, rng);
        Tensor tgt = random_tensor({2, 4}, rng);
        return check_function("grouped_cross_attention", {&q, &k, &v}, [&](Tape& t) {
            return mse(t, t.grouped_cross_attention(t.param(q), t.param(k), t.param(v), 3, 2),
                       tgt);
        });
    });
    prim("sum", [=](Rng& rng) {
        Param a = random_param("a", {3, 4}, rng);
        return check_function("sum", {&a}, [&](Tape& t) { return t.sum(t.param(a)); });
    });
    prim("mean", [=](Rng& rng) {
        Param a = random_param("a", {3, 4}, rng);
        return check_function("mean", {&a}, [&](Tape& t) { return t.mean(t.param(a)); });
    });
    prim("mse_loss", [=](Rng& rng) {
        Param a = random_param("a", {3, 4}, rng);
        Tensor tgt = random_tensor({3, 4}, rng);
        return check_function("mse_loss", {&a}, [&](Tape& t) {
            return t.mse_loss(t.param(a), tgt);
        });
    });
    prim("masked_mae_loss", [=](Rng& rng) {
        Param a = random_param("a", {3, 4}, rng);
        Tensor tgt = random_tensor({3, 4}, rng);
        // Keep |pred - target| away from zero: |.| is not differentiable there.
        for (std::size_t i = 0; i < a.value.size(); ++i)
            if (std::abs(a.value.data[i] - tgt.data[i]) < 1e-2)
                a.value.data[i] = tgt.data[i] + 0.5;
        Tensor mask = Tensor::zeros({3, 4});
        for (double& m : mask.data) m = rng.uniform() < 0.5 ? 1.0 : 0.0;
        mask.data[0] = 1.0;
        return check_function("masked_mae_loss", {&a}, [&](Tape& t) {
            return t.masked_mae_loss(t.param(a), tgt, mask);
        });
    });

    // Composed paths at a tiny scale: 3x3 grid, 6 channels.
    reg.push_back({"fuse_path", true, false, [](Rng& rng) {
        FusionConfig fcfg;
        fcfg.channels = 6;
        fcfg.num_encoder_layers = 2;
        fcfg.num_heads = 2;
        FusionModule fusion(fcfg, rng.next_u64());
        Param x = random_param("x", {9, 6}, rng), xp = random_param("xp", {9, 6}, rng);
        Tensor tgt = random_tensor({9, 6}, rng);
        std::vector<Param*> params = {&x, &xp};
        for (Param* p : fusion.params()) params.push_back(p);
        return check_function("fuse_path", params, [&](Tape& t) {
            return t.mse_loss(fusion.fuse(t, t.param(x), t.param(xp), 1), tgt);
        });
    }});
    reg.push_back({"ffn_fuse_path", true, false, [](Rng& rng) {
        FusionConfig fcfg;
        fcfg.channels = 6;
        fcfg.num_encoder_layers = 2;
        fcfg.num_heads = 2;
        fcfg.ffn_fuse_mode = true;
        FusionModule fusion(fcfg, rng.next_u64());
        Param x = random_param("x", {9, 6}, rng), xp = random_param("xp", {9, 6}, rng);
        Tensor tgt = random_tensor({9, 6}, rng);
        std::vector<Param*> params = {&x, &xp};
        for (Param* p : fusion.params()) params.push_back(p);
        return check_function("ffn_fuse_path", params, [&](Tape& t) {
            return t.mse_loss(fusion.fuse(t, t.param(x), t.param(xp), 1), tgt);
        });
    }});
    reg.push_back({"predict_loss_path", false, true, [](Rng& rng) {
        TrackerConfig tcfg;
        tcfg.grid_h = tcfg.grid_w = 3;
        tcfg.channels = 6;
        tcfg.num_heads = 2;
        tcfg.num_encoder_layers = 1;
        Predictor pred(tcfg, rng.next_u64());
        Param tr1 = random_param("tr1", {9, 6}, rng), tr2 = random_param("tr2", {9, 6}, rng),
              te = random_param("te", {9, 6}, rng);
        BoundingBox b1{0.5, 0.5, 2.0, 2.0}, b2{0.25, 0.5, 2.0, 2.0}, gt{0.5, 0.25, 2.0, 2.0};
        std::vector<Param*> params = {&tr1, &tr2, &te};
        for (Param* p : pred.params()) params.push_back(p);
        return check_function("predict_loss_path", params, [&](Tape& t) {
            auto model = pred.predict_model(t, t.param(tr1), t.param(tr2), t.param(te), b1, b2);
            auto applied = apply_model(t, model.enc_test, model, tcfg);
            auto losses = training_losses(t, applied.y, applied.d, gt, tcfg);
            return losses.total;
        });
    }});

    return reg;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(const std::string& scope, std::uint64_t seed) {
    if (scope != "fusion" && scope != "tracker" && scope != "all")
        throw ContractError("gradcheck scope must be fusion, tracker, or all");
    Rng rng(derive_seed(seed, "gradcheck"));
    std::vector<GradCheckResult> results;
    for (const auto& check : build_registry()) {
        const bool wanted = scope == "all" || (scope == "fusion" && check.in_fusion_scope) ||
                            (scope == "tracker" && check.in_tracker_scope);
        if (!wanted) continue;
        results.push_back(check.run(rng));
    }
    return results;
}

}  // namespace totem
