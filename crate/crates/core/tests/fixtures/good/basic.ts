# expect n=6 m=3 l=8 classes=3
@problemName Basic
@timeStamps false
@missing false
@univariate false
@dimensions 3
@equalLength true
@seriesLength 8
@classLabel true walk run jump
@data
0.00396,0.161704,-0.531338,0.4097,-0.696755,0.001512,0.560153,0.008031:0.006825,-0.5538,0.003064,0.003408,0.148045,0.8425,3.564,0.005334:0.002689,0.004856,-0.822964,-0.959749,3.7277,0.17275,0.0542,0.071156:walk
-0.473254,0.917319,0.00409,0.008783,0.268581,-0.483534,-4.8854,0.002066:-0.067499,0.004916,0.352041,1.2797,0.003953,-2.3586,0.002051,-2.7746:0.001776,-0.332493,0.00164,1.5023,-0.932182,0.676953,0.001684,-0.740622:run
0.003323,-0.9048,0.005981,-0.6565,0.007027,0.1901,3.6153,0.008229:-0.603063,0.7695,0.001159,0.878085,-3.7459,-1.4816,-3.287,-0.984991:0.003149,0.1967,3.5702,-4.3158,0.154,0.293827,-2.3507,0.5553:jump
0.004687,0.007409,0.00602,-1.8505,-2.5492,3.0314,-0.251529,0.008512:0.00734,0.005256,-0.052905,-0.816402,-3.2085,0.004855,4.5241,4.9625:-3.9326,0.5012,0.003,0.003023,-1.0336,0.008436,0.005547,0.00487:walk
0.77511,0.833229,0.8647,0.008478,0.55907,0.9523,-1.9277,-3.2775:-0.8158,0.007573,0.985579,2.8312,3.9099,4.5871,0.005975,3.586:-1.8658,-3.8203,-1.4334,-4.7062,0.170211,-3.7457,-0.774942,0.882575:run
0.006407,0.634701,0.072335,0.003355,0.006165,-0.258441,0.863688,0.299178:1.4749,0.00245,0.479277,-0.893054,-0.505607,3.7525,0.693767,0.005515:0.005537,0.00699,0.007386,0.136736,-0.413965,0.004065,0.004983,-0.401193:jump
