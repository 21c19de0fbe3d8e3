#pragma once

#include <miva/config.hpp>
#include <miva/model.hpp>

// Small model shape used by most unit tests; full 64x64 desk dims are
// exercised by the CLI tests and the acceptance suite.
inline miva::Config tiny_config() {
    miva::Config c;
    c.set("frames", "4");
    c.set("image_size", "16");
    c.set("patch_size", "4");
    c.set("channels", "4");
    c.set("token_dim", "32");
    c.set("ranks.cfa", "2");
    c.set("ranks.ca", "2");
    c.set("ranks.tsa", "1");
    return c;
}

inline miva::ModelDims tiny_dims() { return miva::ModelDims::from_config(tiny_config()); }
