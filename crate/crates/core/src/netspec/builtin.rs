use super::{parse_netspec, NetSpec};
use crate::error::{Error, Result};

pub const BUILTIN_NAMES: [&str; 6] = ["etdnn", "ftdnn", "eftdnn", "resnet", "multitask", "cvector"];

const ETDNN: &str = "\
name etdnn
branch xvector
1 tdnn f1=t-2:t+2 size=512
2 dense f1=t size=512
3 tdnn f1=t-2,t,t+2 size=512
4 dense f1=t size=512
5 tdnn f1=t-3:t+3 size=512
6 dense f1=t size=512
7 tdnn f1=t-4,t,t+4 size=512
8 dense f1=t size=512
9 dense f1=t size=512
10 dense f1=t size=1500
11 pooling size=3000
12 embedding_tap size=512
13 dense size=512
14 output_softmax
tap xvector 12
";

const FTDNN: &str = "\
name ftdnn
branch xvector
1 tdnn f1=t-2:t+2 size=512
2 ftdnn f1=t-2,t f2=t,t+2 size=1024 inner=256
3 ftdnn f1=t f2=t size=1024 inner=256
4 ftdnn f1=t-3,t f2=t,t+3 size=1024 inner=256
5 ftdnn f1=t f2=t size=1024 inner=256 from=3
6 ftdnn f1=t-3,t f2=t,t+3 size=1024 inner=256
7 ftdnn f1=t-3,t f2=t,t+3 size=1024 inner=256 from=2,4
8 ftdnn f1=t-3,t f2=t,t+3 size=1024 inner=256
9 ftdnn f1=t-3,t f2=t,t+3 size=1024 inner=256 from=4,6,8
10 dense f1=t size=2048
11 pooling size=4096
12 embedding_tap size=1024
13 dense size=1024
14 output_softmax
tap xvector 12
";

const EFTDNN: &str = "\
name eftdnn
branch xvector
1 tdnn f1=t-2:t+2 size=512
2 dense size=512
3 ftdnn f1=t-3,t-1 f2=t-1,t+1 f3=t+1,t+3 size=1024 inner=256
4 dense size=1024
5 ftdnn f1=t f2=t f3=t size=1024 inner=256
6 dense size=1024
7 ftdnn f1=t-5,t-2 f2=t-2,t+1 f3=t+1,t+4 size=1024 inner=256
8 dense size=1024
9 ftdnn f1=t f2=t f3=t size=1024 inner=256 from=5
10 dense size=1024
11 ftdnn f1=t-5,t-2 f2=t-2,t+1 f3=t+1,t+4 size=1024 inner=256
12 dense size=1024
13 ftdnn f1=t-5,t-2 f2=t-2,t+1 f3=t+1,t+4 size=1024 inner=256 from=3,7
14 dense size=1024
15 ftdnn f1=t-5,t-2 f2=t-2,t+1 f3=t+1,t+4 size=1024 inner=256
16 dense size=1024
17 ftdnn f1=t f2=t f3=t size=1024 inner=256 from=7,11,15
18 dense f1=t size=2048
19 dense f1=t size=2048
20 dense f1=t size=2048
21 pooling size=4096
22 embedding_tap size=1024
23 dense size=1024
24 output_softmax
tap xvector 22
";

const RESNET: &str = "\
name resnet
branch xvector
1 resnet_block_stack size=512 channels=64,128,256,512 blocks=3,4,6,3
2 dense size=512
3 dense size=1000
4 pooling size=2000
5 embedding_tap size=512
6 dense size=512
7 output_softmax
tap xvector 5
";

const MULTITASK_XVECTOR: &str = "\
branch xvector
1 tdnn f1=t-2:t+2 size=512
2 dense f1=t size=512
3 tdnn f1=t-2,t,t+2 size=512
4 dense f1=t size=512
5 tdnn f1=t-3,t,t+3 size=512
6 dense f1=t size=512
7 tdnn f1=t-4,t,t+4 size=512
8 dense f1=t size=512
9 dense f1=t size=512
10 dense f1=t size=1500
";

const MULTITASK_ASR: &str = "\
branch asr
1 tdnn f1=t-2:t+2 size=512
2 tdnn f1=t-2,t,t+2 size=512
3 tdnn f1=t-3,t,t+3 size=512
4 dense f1=t size=512
5 dense f1=t size=512
6 dense f1=t size=512
7 dense f1=t size=512
";

const CVECTOR_BOTTLENECK: &str = "\
branch bottleneck
1 tdnn f1=t-2:t+2 size=650
2 tdnn f1=t-1:t+1 size=650
3 tdnn f1=t-1:t+1 size=650
4 tdnn f1=t-3,t,t+3 size=650
5 tdnn f1=t-6,t-3,t size=128 act=linear
";

/// Default number of senone targets for frame-level phonetic branches.
pub const DEFAULT_SENONES: usize = 3800;

fn multitask_text() -> String {
    format!(
        "name multitask\n{MULTITASK_XVECTOR}11 pooling size=3000\n12 embedding_tap size=512\n\
         13 dense size=512\n14 output_softmax\n{MULTITASK_ASR}share xvector asr 1\n\
         tap xvector 12\nclasses asr {DEFAULT_SENONES}\n"
    )
}

fn cvector_text() -> String {
    format!(
        "name cvector\n{MULTITASK_XVECTOR}11 pooling size=3256\n12 embedding_tap size=512\n\
         13 dense size=512\n14 output_softmax\n{MULTITASK_ASR}{CVECTOR_BOTTLENECK}\
         share xvector asr 1\nconcat_pool bottleneck 5\ntap xvector 12\n\
         classes asr {DEFAULT_SENONES}\nclasses bottleneck {DEFAULT_SENONES}\n"
    )
}

/// One of the six reference architectures at full size. Speaker class
/// counts are left unset; they depend on the training data.
pub fn builtin(name: &str) -> Result<NetSpec> {
    let text = match name {
        "etdnn" => ETDNN.to_string(),
        "ftdnn" => FTDNN.to_string(),
        "eftdnn" => EFTDNN.to_string(),
        "resnet" => RESNET.to_string(),
        "multitask" => multitask_text(),
        "cvector" => cvector_text(),
        other => return Err(Error::UnknownArchitecture(other.to_string())),
    };
    parse_netspec(&text)
}
